//! Report parsing and pretty-printing.

use gwpasan::report::{split_reports, TraceRecord, REPORT_HEADER};
use gwpasan::{parse_report, AccessKind, ErrorReport, ParseError};

use crate::inject::locator_record;
use crate::options::{Format, Record};

/// Parses every report in `text`. Text outside reports is ignored. Error
/// line numbers count from the start of `text`.
pub fn parse_all(text: &str) -> Result<Vec<ErrorReport>, ParseError> {
    let chunks = split_reports(text);
    if chunks.is_empty() {
        return Err(ParseError {
            line: 1,
            message: format!("no report found; expected \"{REPORT_HEADER}\""),
        });
    }
    chunks
        .into_iter()
        .map(|chunk| {
            parse_report(chunk).map_err(|mut e| {
                let offset = chunk.as_ptr() as usize - text.as_ptr() as usize;
                e.line += text[..offset].matches('\n').count();
                e
            })
        })
        .collect()
}

fn access_word(r: &ErrorReport) -> &'static str {
    if r.kind.is_free_error() {
        return "free";
    }
    match r.access_kind {
        AccessKind::Read => "read",
        AccessKind::Write => "write",
        AccessKind::Unknown => "unknown",
    }
}

fn frames(t: &[usize]) -> String {
    t.iter().map(|pc| format!("{pc:#x}")).collect::<Vec<_>>().join(",")
}

pub fn render(reports: &[ErrorReport], format: Format) -> String {
    let mut out = String::new();
    for r in reports {
        match format {
            Format::Human => {
                let trace = |label: &str, t: &Option<TraceRecord>, out: &mut String| match t {
                    Some(t) => out.push_str(&format!(
                        "  {label:<12}thread {}, {} frame(s) {}\n",
                        t.thread,
                        t.frames.len(),
                        frames(&t.frames)
                    )),
                    None => out.push_str(&format!("  {label:<12}-\n")),
                };
                out.push_str(&format!("{}\n", r.kind));
                out.push_str(&format!("  access      {} at {:#x}\n", access_word(r), r.access_address));
                out.push_str(&format!("  locator     {}\n", locator_record(r.locator())));
                if let Some(off) = r.offset() {
                    out.push_str(&format!("  offset      {off}\n"));
                }
                out.push_str(&format!(
                    "  allocation  {}B at {:#x}\n",
                    r.allocation_size, r.allocation_address
                ));
                out.push_str(&format!(
                    "  fault       thread {}, {} frame(s) {}\n",
                    r.faulting_thread,
                    r.fault_trace.len(),
                    frames(&r.fault_trace)
                ));
                trace("deallocated", &r.deallocation, &mut out);
                trace("allocated", &r.allocation, &mut out);
                if r.metadata_lost {
                    out.push_str("  metadata    lost\n");
                }
            }
            Format::Records => {
                let rec = Record::new("report")
                    .field("kind", r.kind)
                    .field("access", access_word(r))
                    .field("address", format!("{:#x}", r.access_address))
                    .field("locator", locator_record(r.locator()))
                    .field("offset", r.offset().map_or("-".into(), |o| o.to_string()))
                    .field("size", r.allocation_size)
                    .field("allocation", format!("{:#x}", r.allocation_address))
                    .field("thread", r.faulting_thread)
                    .field("frames", r.fault_trace.len())
                    .field("dealloc_frames", r.deallocation.as_ref().map_or(0, |t| t.frames.len()))
                    .field("alloc_frames", r.allocation.as_ref().map_or(0, |t| t.frames.len()))
                    .field("metadata_lost", u8::from(r.metadata_lost));
                out.push_str(&format!("{rec}\n"));
            }
        }
    }
    out
}
