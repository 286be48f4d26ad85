use gwpasan::report::{split_reports, TraceRecord, REPORT_TRAILER};
use gwpasan::trace::{StackTrace, MAX_FRAMES};
use gwpasan::{parse_report, AccessKind, ErrorKind, ErrorReport, Locator};
use proptest::prelude::*;

fn frames(pcs: &[usize]) -> StackTrace {
    pcs.iter().copied().collect()
}

fn uaf() -> ErrorReport {
    ErrorReport {
        kind: ErrorKind::UseAfterFree,
        access_address: 0x7f00_0000_1008,
        access_kind: AccessKind::Write,
        faulting_thread: 17,
        fault_trace: frames(&[0x5555_0000_1234, 0x5555_0000_1300]),
        allocation_address: 0x7f00_0000_1000,
        allocation_size: 41,
        allocation: Some(TraceRecord {
            thread: 17,
            frames: frames(&[0x5555_0000_2000]),
        }),
        deallocation: Some(TraceRecord {
            thread: 18,
            frames: frames(&[0x5555_0000_3000, 0x5555_0000_3100]),
        }),
        metadata_lost: false,
    }
}

const UAF_GOLDEN: &str = "\
*** GWP-ASan detected a memory error ***
Use-after-free write at 0x7f0000001008 by thread 17:
  #1 [0x555500001234]
  #2 [0x555500001300]

The access is within 41B allocation at 0x7f0000001000

0x7f0000001000 was deallocated by thread 18:
  #1 [0x555500003000]
  #2 [0x555500003100]

0x7f0000001000 was allocated by thread 17:
  #1 [0x555500002000]
*** End GWP-ASan report ***
";

const UNDERFLOW_GOLDEN: &str = "\
*** GWP-ASan detected a memory error ***
Out-of-bounds read at 0x7f0000000ffe by thread 5:
  #1 [0x400100]

The access is 2B left of 41B allocation at 0x7f0000001000

0x7f0000001000 was allocated by thread 5:
  <unavailable>
*** End GWP-ASan report ***
";

fn underflow() -> ErrorReport {
    ErrorReport {
        kind: ErrorKind::BufferUnderflow,
        access_address: 0x7f00_0000_0ffe,
        access_kind: AccessKind::Read,
        faulting_thread: 5,
        fault_trace: frames(&[0x40_0100]),
        allocation_address: 0x7f00_0000_1000,
        allocation_size: 41,
        allocation: Some(TraceRecord {
            thread: 5,
            frames: StackTrace::new(),
        }),
        deallocation: None,
        metadata_lost: false,
    }
}

#[test]
fn use_after_free_matches_golden() {
    assert_eq!(uaf().to_string(), UAF_GOLDEN);
    assert_eq!(parse_report(UAF_GOLDEN).unwrap(), uaf());
}

#[test]
fn underflow_matches_golden() {
    let r = underflow();
    assert_eq!(r.locator(), Locator::Left(2));
    assert_eq!(r.to_string(), UNDERFLOW_GOLDEN);
    assert_eq!(parse_report(UNDERFLOW_GOLDEN).unwrap(), r);
}

#[test]
fn metadata_lost_replaces_trace_blocks() {
    let mut r = uaf();
    r.metadata_lost = true;
    r.allocation = None;
    r.deallocation = None;
    let text = r.to_string();
    assert!(text.contains("\n\n<metadata lost>\n*** End"), "{text}");
    assert_eq!(parse_report(&text).unwrap(), r);
}

#[test]
fn symbolized_frames_keep_only_the_address() {
    let text = UAF_GOLDEN.replace("  #1 [0x555500001234]", "  #1 /bin/app(+0x1234) [0x555500001234]");
    assert_eq!(parse_report(&text).unwrap(), uaf());
}

#[test]
fn truncated_report_names_the_missing_trailer() {
    let cut = UAF_GOLDEN.replace(&format!("{REPORT_TRAILER}\n"), "");
    let e = parse_report(&cut).unwrap_err();
    assert!(e.message.contains("missing trailer"), "{e}");
    assert!(e.message.contains(REPORT_TRAILER));
}

#[test]
fn malformed_lines_are_located() {
    let bad = UAF_GOLDEN.replace("within 41B", "within fortyone B");
    let e = parse_report(&bad).unwrap_err();
    assert_eq!(e.line, 6, "{e}");

    let bad = UAF_GOLDEN.replace("by thread 17:\n  #1", "by thread x:\n  #1");
    assert_eq!(parse_report(&bad).unwrap_err().line, 2);

    let inconsistent = UNDERFLOW_GOLDEN.replace("2B left", "3B left");
    assert!(parse_report(&inconsistent)
        .unwrap_err()
        .message
        .contains("disagrees"));
}

#[test]
fn split_finds_every_report_in_noise() {
    let text = format!("noise\n{UAF_GOLDEN}more noise\n{UNDERFLOW_GOLDEN}tail");
    let parts = split_reports(&text);
    assert_eq!(parts.len(), 2);
    assert_eq!(parse_report(parts[0]).unwrap(), uaf());
    assert_eq!(parse_report(parts[1]).unwrap(), underflow());
}

fn trace() -> impl Strategy<Value = StackTrace> {
    prop::collection::vec(any::<usize>(), 0..=MAX_FRAMES).prop_map(|v| v.into_iter().collect())
}

fn record() -> impl Strategy<Value = Option<TraceRecord>> {
    prop::option::of((any::<u64>(), trace()).prop_map(|(thread, frames)| TraceRecord { thread, frames }))
}

prop_compose! {
    fn report()(
        kind in prop::sample::select(ErrorKind::ALL.to_vec()),
        access_kind in prop::sample::select(vec![AccessKind::Read, AccessKind::Write, AccessKind::Unknown]),
        faulting_thread in any::<u64>(),
        fault_trace in trace(),
        allocation_address in 0x1000usize..1 << 46,
        allocation_size in 1usize..=65536,
        offset in -8192i64..8192,
        unattributed_free in any::<bool>(),
        allocation in record(),
        deallocation in record(),
        metadata_lost in any::<bool>(),
    ) -> ErrorReport {
        let size = allocation_size as i64;
        // Pick an access address consistent with the kind's locator.
        let offset = match kind {
            ErrorKind::BufferUnderflow => -offset.abs().max(1),
            ErrorKind::BufferOverflow => size + offset.abs(),
            ErrorKind::DoubleFree => 0,
            _ => offset,
        };
        let unattributed = kind == ErrorKind::IndeterminateGuardHit
            || (kind == ErrorKind::InvalidFree && unattributed_free);
        let (allocation_address, allocation_size) = if unattributed {
            (0, 0)
        } else {
            (allocation_address, allocation_size)
        };
        let base = if unattributed { 0x7f00_0000_0000 } else { allocation_address };
        let mut r = ErrorReport {
            kind,
            access_address: base.wrapping_add(offset as usize),
            access_kind: if kind.is_free_error() { AccessKind::Unknown } else { access_kind },
            faulting_thread,
            fault_trace,
            allocation_address,
            allocation_size,
            allocation: None,
            deallocation: None,
            metadata_lost: false,
        };
        if !unattributed {
            if metadata_lost {
                r.metadata_lost = true;
            } else {
                r.allocation = allocation;
                r.deallocation = deallocation;
            }
        }
        r
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_render(r in report()) {
        let text = r.to_string();
        prop_assert_eq!(parse_report(&text).unwrap(), r);
    }
}

#[test]
fn headline_errors_point_at_the_headline() {
    for bad in ["Use-after-free write by thread 17:", "Use-after-free write at 0xzz by thread 17:", "Lost write at 0x1 by thread 17:"] {
        let text = UAF_GOLDEN.replace("Use-after-free write at 0x7f0000001008 by thread 17:", bad);
        assert_eq!(parse_report(&text).unwrap_err().line, 2, "{bad}");
    }
}
