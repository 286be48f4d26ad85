//! Fault-driven detection, exercised in-process in recoverable mode.

use std::sync::{Arc, Barrier};

use gwpasan::platform::page_size;
use gwpasan::report::Locator;
use gwpasan::{
    AccessKind, AlignmentPolicy, CounterSamplerConfig, ErrorKind, GuardianAllocator, GuardianConfig, PoolConfig,
    ProcessSamplingConfig, ReportSink, ReporterConfig, SamplingPolicy,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const SIZE: usize = 41;

fn config(alignment: AlignmentPolicy, rate: u32) -> GuardianConfig {
    GuardianConfig {
        pool: PoolConfig {
            slot_count: 4,
            max_simultaneous_allocations: 4,
            alignment,
            min_alignment: 1,
            seed: 1,
            ..PoolConfig::default()
        },
        policy: SamplingPolicy::Counter(CounterSamplerConfig {
            sample_rate: rate,
            rng_seed: Some(1),
        }),
        reporter: ReporterConfig {
            recoverable: true,
            sink: ReportSink::Capture { capacity: 1 << 16 },
            module_offsets: false,
        },
        ..GuardianConfig::default()
    }
}

fn guarded(a: &GuardianAllocator, size: usize) -> *mut u8 {
    loop {
        let p = a.malloc(size, 1);
        if a.is_guarded(p) {
            return p;
        }
        unsafe { a.free(p) };
    }
}

/// Reads one byte at `p + offset` from a fresh allocator and returns the
/// single report it produced, if any.
fn probe(alignment: AlignmentPolicy, free_first: bool, offset: isize) -> Option<gwpasan::ErrorReport> {
    let a = GuardianAllocator::new(config(alignment, 1)).unwrap();
    let p = guarded(&a, SIZE);
    unsafe {
        if free_first {
            a.free(p);
        }
        p.offset(offset).read_volatile();
    }
    let mut reports = a.reports();
    assert!(reports.len() <= 1, "{}", a.report_text());
    reports.pop()
}

#[test]
fn every_byte_of_a_freed_slot_is_a_use_after_free() {
    let page = page_size() as isize;
    for off in 0..page {
        let r = probe(AlignmentPolicy::Left, true, off).unwrap_or_else(|| panic!("offset {off} undetected"));
        assert_eq!(r.kind, ErrorKind::UseAfterFree, "offset {off}");
        assert_eq!(r.access_kind, AccessKind::Read);
        let expected = if off < SIZE as isize {
            Locator::Within(off as usize)
        } else {
            Locator::Right(off as usize - SIZE + 1)
        };
        assert_eq!(r.locator(), expected);
        assert_eq!(r.allocation_size, SIZE);
        assert!(r.allocation.is_some() && r.deallocation.is_some());
    }
}

#[test]
fn every_byte_of_the_left_guard_is_an_underflow() {
    let page = page_size() as isize;
    for k in 1..=page {
        let r = probe(AlignmentPolicy::Left, false, -k).unwrap_or_else(|| panic!("-{k} undetected"));
        assert_eq!(r.kind, ErrorKind::BufferUnderflow, "-{k}");
        assert_eq!(r.locator(), Locator::Left(k as usize));
    }
}

#[test]
fn every_byte_of_the_right_guard_is_an_overflow() {
    let page = page_size() as isize;
    for j in 0..page {
        let off = SIZE as isize + j;
        let r = probe(AlignmentPolicy::Right, false, off).unwrap_or_else(|| panic!("+{off} undetected"));
        assert_eq!(r.kind, ErrorKind::BufferOverflow, "+{off}");
        assert_eq!(r.locator(), Locator::Right(j as usize + 1));
    }
}

#[test]
fn left_aligned_slack_is_a_known_false_negative() {
    let page = page_size() as isize;
    for off in SIZE as isize..page {
        assert!(probe(AlignmentPolicy::Left, false, off).is_none(), "offset {off}");
    }
    assert!(probe(AlignmentPolicy::Left, false, page).is_some());
}

#[test]
fn free_errors_need_no_fault() {
    for kind in [ErrorKind::DoubleFree, ErrorKind::InvalidFree] {
        for offset in [0usize, 1, 40] {
            let a = GuardianAllocator::new(config(AlignmentPolicy::Left, 1)).unwrap();
            let p = guarded(&a, SIZE);
            unsafe {
                if kind == ErrorKind::DoubleFree {
                    a.free(p);
                    a.free(p);
                } else if offset == 0 {
                    continue;
                } else {
                    a.free(p.add(offset));
                }
            }
            let reports = a.reports();
            assert_eq!(reports.len(), 1);
            assert_eq!(reports[0].kind, kind);
            let s = a.stats();
            assert_eq!(s.silent_recoveries, 0, "a free error must not fault");
        }
    }
}

#[test]
fn recovery_reports_once_then_reads_zero() {
    let a = GuardianAllocator::new(config(AlignmentPolicy::Left, 1)).unwrap();
    let p = guarded(&a, SIZE);
    let q = guarded(&a, SIZE);
    unsafe {
        p.write_bytes(0xee, SIZE);
        q.write_bytes(0xdd, SIZE);
        a.free(p);
        a.free(q);
        p.add(8).write_volatile(7);
        assert_eq!(a.reports().len(), 1);
        // The first fault unprotected p's page zeroed; q's page still faults
        // but is absorbed silently.
        assert!((0..SIZE).all(|i| i == 8 || p.add(i).read_volatile() == 0));
        assert!((0..SIZE).all(|i| q.add(i).read_volatile() == 0));
        q.sub(1).read_volatile();
    }
    let s = a.stats();
    assert_eq!(s.reports, 1, "{}", a.report_text());
    assert!(s.silent_recoveries >= 2);
    assert!(s.disabled);
    // Disabled means no more guarded allocations, but malloc keeps working.
    let r = a.malloc(SIZE, 1);
    assert!(!r.is_null() && !a.is_guarded(r));
    unsafe { a.free(r) };
}

#[test]
fn fault_while_this_thread_holds_the_pool_lock() {
    for _ in 0..100 {
        let a = GuardianAllocator::new(config(AlignmentPolicy::Left, 1)).unwrap();
        let p = guarded(&a, SIZE);
        let lock = a.guardian().unwrap().pool().lock();
        unsafe { p.sub(2).read_volatile() };
        drop(lock);
        let r = a.reports();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].kind, ErrorKind::BufferUnderflow);
        assert!(r[0].allocation.is_some());
    }
}

#[test]
fn fault_while_a_peer_holds_the_pool_lock() {
    for _ in 0..100 {
        let a = Arc::new(GuardianAllocator::new(config(AlignmentPolicy::Left, 1)).unwrap());
        let p = guarded(&a, SIZE) as usize;
        let held = Arc::new(Barrier::new(2));
        let done = Arc::new(Barrier::new(2));
        let peer = {
            let (a, held, done) = (Arc::clone(&a), Arc::clone(&held), Arc::clone(&done));
            std::thread::spawn(move || {
                let lock = a.guardian().unwrap().pool().lock();
                held.wait();
                done.wait();
                drop(lock);
            })
        };
        held.wait();
        unsafe { (p as *mut u8).add(SIZE + page_size()).read_volatile() };
        done.wait();
        peer.join().unwrap();
        let r = a.reports();
        assert_eq!(r.len(), 1, "{}", a.report_text());
    }
}

#[test]
fn evicted_metadata_is_reported_as_lost() {
    let mut c = config(AlignmentPolicy::Left, 1);
    c.metadata_capacity = Some(1);
    let a = GuardianAllocator::new(c).unwrap();
    let p = guarded(&a, SIZE);
    let q = guarded(&a, SIZE);
    unsafe {
        a.free(p);
        p.read_volatile();
        a.free(q);
    }
    let r = &a.reports()[0];
    assert_eq!(r.kind, ErrorKind::UseAfterFree);
    assert!(r.metadata_lost);
    assert!(r.allocation.is_none() && r.deallocation.is_none());
    assert!(a.report_text().contains("<metadata lost>"));
}

/// Runs a random allocation script and returns everything the program
/// could observe: bytes read back, usable sizes and calloc contents.
fn script(a: &GuardianAllocator, ops: usize, seed: u64) -> Vec<u64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut live: Vec<(*mut u8, usize, u8)> = Vec::new();
    let mut seen = Vec::new();
    let sum = |p: *mut u8, n: usize| -> u64 { (0..n).map(|i| unsafe { p.add(i).read() } as u64 * (i as u64 + 1)).sum() };
    for i in 0..ops {
        let size = if rng.random_bool(0.05) { rng.random_range(4097..10_000) } else { rng.random_range(1..600) };
        let tag = i as u8;
        match rng.random_range(0..10) {
            0..=3 if live.len() < 256 => {
                let p = a.malloc(size, 1);
                unsafe { p.write_bytes(tag, size) };
                live.push((p, size, tag));
            }
            4 if live.len() < 256 => {
                let p = a.calloc(1, size);
                seen.push(sum(p, size));
                unsafe { p.write_bytes(tag, size) };
                live.push((p, size, tag));
            }
            5 if !live.is_empty() => {
                let j = rng.random_range(0..live.len());
                let (p, old, t) = live[j];
                let q = unsafe { a.realloc(p, size) };
                seen.push(sum(q, old.min(size)));
                unsafe { q.write_bytes(t, size) };
                live[j] = (q, size, t);
            }
            _ if !live.is_empty() => {
                let (p, n, _) = live.swap_remove(rng.random_range(0..live.len()));
                seen.push(sum(p, n));
                unsafe { a.free(p) };
            }
            _ => {}
        }
    }
    for (p, n, _) in live {
        seen.push(sum(p, n));
        unsafe { a.free(p) };
    }
    seen
}

#[test]
fn enabled_and_disabled_runs_observe_the_same_data() {
    let mut on = config(AlignmentPolicy::Random, 2);
    on.pool.slot_count = 16;
    on.pool.max_simultaneous_allocations = 16;
    let mut off = on.clone();
    off.process_sampling = ProcessSamplingConfig::NEVER;
    let enabled = GuardianAllocator::new(on).unwrap();
    let disabled = GuardianAllocator::new(off).unwrap();
    assert!(!disabled.is_enabled());
    let a = script(&enabled, 100_000, 77);
    let b = script(&disabled, 100_000, 77);
    assert_eq!(a, b);
    let s = enabled.stats();
    assert!(s.guarded > 1000, "{s:?}");
    assert_eq!(s.reports, 0, "{}", enabled.report_text());
}
