//! Error reports: classification results, their text rendering and the
//! inverse parser.
//!
//! Text format (one report):
//!
//! ```text
//! *** GWP-ASan detected a memory error ***
//! Use-after-free write at 0x7feccab26008 by thread 31027:
//!   #1 /path/to/bin(+0x1a55) [0x55585c0afa55]
//!   #2 [0x55585c0af7cf]
//!
//! The access is within 41B allocation at 0x7feccab26000
//!
//! 0x7feccab26000 was deallocated by thread 31027:
//!   #1 [0x55585c0af7b3]
//!
//! 0x7feccab26000 was allocated by thread 31027:
//!   #1 [0x55585c0af787]
//! *** End GWP-ASan report ***
//! ```
//!
//! Frames are numbered from 1 and carry the module-relative offset when the
//! module is known. An empty trace renders as `  <unavailable>`; a report
//! whose metadata was evicted replaces both allocation blocks with
//! `<metadata lost>`.

use std::fmt::{self, Write as _};

use arrayvec::{ArrayString, ArrayVec};
use thiserror::Error;

use crate::trace::{StackTrace, MAX_FRAMES};

pub const REPORT_HEADER: &str = "*** GWP-ASan detected a memory error ***";
pub const REPORT_TRAILER: &str = "*** End GWP-ASan report ***";
pub const METADATA_LOST: &str = "<metadata lost>";
pub const TRACE_UNAVAILABLE: &str = "<unavailable>";
const UNATTRIBUTED: &str = "in a guard page with no adjacent allocation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    UseAfterFree,
    BufferOverflow,
    BufferUnderflow,
    DoubleFree,
    InvalidFree,
    IndeterminateGuardHit,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 6] = [
        ErrorKind::UseAfterFree,
        ErrorKind::BufferOverflow,
        ErrorKind::BufferUnderflow,
        ErrorKind::DoubleFree,
        ErrorKind::InvalidFree,
        ErrorKind::IndeterminateGuardHit,
    ];

    fn headline(self) -> &'static str {
        match self {
            ErrorKind::UseAfterFree => "Use-after-free",
            ErrorKind::BufferOverflow | ErrorKind::BufferUnderflow => "Out-of-bounds",
            ErrorKind::DoubleFree => "Double-free",
            ErrorKind::InvalidFree => "Invalid free",
            ErrorKind::IndeterminateGuardHit => "Indeterminate guard hit",
        }
    }

    /// Kinds detected by the allocator itself rather than by a fault.
    pub fn is_free_error(self) -> bool {
        matches!(self, ErrorKind::DoubleFree | ErrorKind::InvalidFree)
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::UseAfterFree => "UseAfterFree",
            ErrorKind::BufferOverflow => "BufferOverflow",
            ErrorKind::BufferUnderflow => "BufferUnderflow",
            ErrorKind::DoubleFree => "DoubleFree",
            ErrorKind::InvalidFree => "InvalidFree",
            ErrorKind::IndeterminateGuardHit => "IndeterminateGuardHit",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Unknown,
}

impl AccessKind {
    fn word(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Unknown => "access",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub thread: u64,
    pub frames: StackTrace,
}

/// Where the access fell relative to the allocation's user bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locator {
    /// Byte offset from the allocation start.
    Within(usize),
    /// Bytes below the allocation start (1 = the byte just before it).
    Left(usize),
    /// Bytes past the allocation end (1 = the byte just after it).
    Right(usize),
    Unattributed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReport {
    pub kind: ErrorKind,
    pub access_address: usize,
    /// Ignored for double and invalid frees.
    pub access_kind: AccessKind,
    pub faulting_thread: u64,
    pub fault_trace: StackTrace,
    pub allocation_address: usize,
    pub allocation_size: usize,
    pub allocation: Option<TraceRecord>,
    pub deallocation: Option<TraceRecord>,
    pub metadata_lost: bool,
}

impl ErrorReport {
    /// True when no allocation could be associated with the access: wild
    /// guard hits, and invalid frees of pool addresses no allocation owns
    /// (signalled by a zero `allocation_size`).
    pub fn is_unattributed(&self) -> bool {
        match self.kind {
            ErrorKind::IndeterminateGuardHit => true,
            ErrorKind::InvalidFree => self.allocation_size == 0,
            _ => false,
        }
    }

    pub fn locator(&self) -> Locator {
        if self.is_unattributed() {
            return Locator::Unattributed;
        }
        let start = self.allocation_address;
        let end = start.wrapping_add(self.allocation_size);
        if self.access_address < start {
            Locator::Left(start - self.access_address)
        } else if self.access_address >= end {
            Locator::Right(self.access_address - end + 1)
        } else {
            Locator::Within(self.access_address - start)
        }
    }

    /// Signed offset of the access from the allocation start.
    pub fn offset(&self) -> Option<i64> {
        (!self.is_unattributed()).then(|| self.access_address.wrapping_sub(self.allocation_address) as i64)
    }

    /// Renders with module-relative frame offsets resolved through `modules`.
    pub fn render_with<'a>(&'a self, modules: &'a ModuleTable) -> Rendered<'a> {
        Rendered {
            report: self,
            modules: Some(modules),
        }
    }
}

/// Display adapter produced by [`ErrorReport::render_with`].
pub struct Rendered<'a> {
    report: &'a ErrorReport,
    modules: Option<&'a ModuleTable>,
}

impl<'a> Rendered<'a> {
    pub fn new(report: &'a ErrorReport, modules: Option<&'a ModuleTable>) -> Self {
        Self { report, modules }
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Rendered {
            report: self,
            modules: None,
        }
        .fmt(f)
    }
}

impl fmt::Display for Rendered<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.report;
        writeln!(f, "{REPORT_HEADER}")?;
        f.write_str(r.kind.headline())?;
        if !r.kind.is_free_error() {
            write!(f, " {}", r.access_kind.word())?;
        }
        writeln!(f, " at {:#x} by thread {}:", r.access_address, r.faulting_thread)?;
        write_frames(f, &r.fault_trace, self.modules)?;
        writeln!(f)?;
        f.write_str("The access is ")?;
        let size = r.allocation_size;
        let at = r.allocation_address;
        match r.locator() {
            Locator::Within(_) => writeln!(f, "within {size}B allocation at {at:#x}")?,
            Locator::Left(k) => writeln!(f, "{k}B left of {size}B allocation at {at:#x}")?,
            Locator::Right(k) => writeln!(f, "{k}B right of {size}B allocation at {at:#x}")?,
            Locator::Unattributed => writeln!(f, "{UNATTRIBUTED}")?,
        }
        if r.metadata_lost {
            writeln!(f)?;
            writeln!(f, "{METADATA_LOST}")?;
        } else {
            if let Some(d) = &r.deallocation {
                writeln!(f)?;
                writeln!(f, "{at:#x} was deallocated by thread {}:", d.thread)?;
                write_frames(f, &d.frames, self.modules)?;
            }
            if let Some(a) = &r.allocation {
                writeln!(f)?;
                writeln!(f, "{at:#x} was allocated by thread {}:", a.thread)?;
                write_frames(f, &a.frames, self.modules)?;
            }
        }
        writeln!(f, "{REPORT_TRAILER}")
    }
}

fn write_frames(f: &mut fmt::Formatter<'_>, frames: &[usize], modules: Option<&ModuleTable>) -> fmt::Result {
    if frames.is_empty() {
        return writeln!(f, "  {TRACE_UNAVAILABLE}");
    }
    for (i, &pc) in frames.iter().enumerate() {
        match modules.and_then(|m| m.resolve(pc)) {
            Some((name, offset)) => writeln!(f, "  #{} {name}(+{offset:#x}) [{pc:#x}]", i + 1)?,
            None => writeln!(f, "  #{} [{pc:#x}]", i + 1)?,
        }
    }
    Ok(())
}

pub const MAX_MODULES: usize = 128;
pub const MAX_MODULE_NAME: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Module {
    pub name: ArrayString<MAX_MODULE_NAME>,
    /// Load bias; frame offsets are relative to it.
    pub bias: usize,
    pub start: usize,
    pub end: usize,
}

/// Executable address ranges of loaded modules, captured ahead of time so
/// frames can be annotated from a signal handler.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModuleTable {
    modules: ArrayVec<Module, MAX_MODULES>,
}

impl ModuleTable {
    pub fn from_entries(entries: impl IntoIterator<Item = Module>) -> Self {
        Self {
            modules: entries.into_iter().take(MAX_MODULES).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn resolve(&self, pc: usize) -> Option<(&str, usize)> {
        self.modules
            .iter()
            .find(|m| (m.start..m.end).contains(&pc))
            .map(|m| (m.name.as_str(), pc - m.bias))
    }

    /// Snapshot of the modules loaded right now.
    #[cfg(target_os = "linux")]
    pub fn current() -> Self {
        unsafe extern "C" fn visit(
            info: *mut libc::dl_phdr_info,
            _size: libc::size_t,
            data: *mut libc::c_void,
        ) -> libc::c_int {
            // SAFETY: the loader passes a valid info block; data is our table.
            let info = &*info;
            let table = &mut *(data as *mut ModuleTable);
            let mut name = ArrayString::<MAX_MODULE_NAME>::new();
            if !info.dlpi_name.is_null() && *info.dlpi_name != 0 {
                let raw = std::ffi::CStr::from_ptr(info.dlpi_name).to_string_lossy();
                push_truncated(&mut name, &raw);
            } else if let Ok(exe) = std::env::current_exe() {
                push_truncated(&mut name, &exe.to_string_lossy());
            }
            let bias = info.dlpi_addr as usize;
            for i in 0..info.dlpi_phnum as usize {
                let ph = &*info.dlpi_phdr.add(i);
                if ph.p_type == libc::PT_LOAD && ph.p_flags & libc::PF_X != 0 {
                    let start = bias + ph.p_vaddr as usize;
                    let module = Module {
                        name,
                        bias,
                        start,
                        end: start + ph.p_memsz as usize,
                    };
                    if table.modules.try_push(module).is_err() {
                        return 1;
                    }
                }
            }
            0
        }
        let mut table = ModuleTable::default();
        // SAFETY: the callback only touches the table passed through data.
        unsafe {
            libc::dl_iterate_phdr(Some(visit), (&mut table as *mut ModuleTable).cast());
        }
        table
    }

    #[cfg(not(target_os = "linux"))]
    pub fn current() -> Self {
        Self::default()
    }
}

fn push_truncated<const N: usize>(out: &mut ArrayString<N>, s: &str) {
    for c in s.chars() {
        if out.try_push(c).is_err() {
            break;
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    /// 1-based line number where parsing stopped.
    pub line: usize,
    pub message: String,
}

struct Lines<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&'a str> {
        let l = self.peek();
        if l.is_some() {
            self.pos += 1;
        }
        l
    }

    fn line_no(&self) -> usize {
        self.pos + 1
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line_no(),
            message: message.into(),
        })
    }

    /// Error pointing at the line just consumed.
    fn err_here<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.pos,
            message: message.into(),
        })
    }

    fn expect(&mut self, what: &str) -> Result<&'a str, ParseError> {
        match self.next() {
            Some(l) => Ok(l),
            None => {
                self.pos += 1;
                self.err(format!("unexpected end of input, expected {what}"))
            }
        }
    }
}

fn parse_hex(s: &str) -> Option<usize> {
    usize::from_str_radix(s.strip_prefix("0x")?, 16).ok()
}

fn parse_frames(lines: &mut Lines<'_>) -> Result<StackTrace, ParseError> {
    let mut frames = StackTrace::new();
    if lines.peek().map(str::trim) == Some(TRACE_UNAVAILABLE) {
        lines.next();
        return Ok(frames);
    }
    while let Some(line) = lines.peek() {
        let Some(rest) = line.strip_prefix("  #") else {
            break;
        };
        let pc = rest
            .rsplit_once('[')
            .and_then(|(_, tail)| tail.strip_suffix(']'))
            .and_then(parse_hex);
        let Some(pc) = pc else {
            return lines.err(format!("malformed frame line {line:?}"));
        };
        if frames.try_push(pc).is_err() {
            return lines.err(format!("more than {MAX_FRAMES} frames"));
        }
        lines.next();
    }
    if frames.is_empty() {
        return lines.err("expected at least one frame or <unavailable>");
    }
    Ok(frames)
}

/// Splits "<head> by thread <tid>:" from the line just consumed.
fn parse_thread_suffix<'a>(lines: &Lines<'_>, line: &'a str) -> Result<(&'a str, u64), ParseError> {
    let err = |message: String| lines.err_here(message);
    let Some(body) = line.strip_suffix(':') else {
        return err(format!("expected trailing ':' in {line:?}"));
    };
    let Some((head, tid)) = body.rsplit_once(" by thread ") else {
        return err(format!("missing thread id in {line:?}"));
    };
    match tid.parse() {
        Ok(t) => Ok((head, t)),
        Err(_) => err(format!("bad thread id {tid:?}")),
    }
}

/// Parses one rendered report (symbolized frame text is accepted and
/// ignored; only the bracketed addresses are kept).
pub fn parse_report(text: &str) -> Result<ErrorReport, ParseError> {
    let mut lines = Lines {
        lines: text.lines().collect(),
        pos: 0,
    };
    while lines.peek().is_some_and(|l| l.trim().is_empty()) {
        lines.next();
    }
    if lines.expect("report header")?.trim_end() != REPORT_HEADER {
        lines.pos -= 1;
        return lines.err(format!("expected {REPORT_HEADER:?}"));
    }

    let headline = lines.expect("error description")?;
    let (head, faulting_thread) = parse_thread_suffix(&lines, headline)?;
    let Some((what, addr)) = head.rsplit_once(" at ") else {
        return lines.err_here("missing access address");
    };
    let Some(access_address) = parse_hex(addr) else {
        return lines.err_here(format!("bad address {addr:?}"));
    };
    let (head_kind, access_kind) = match what.rsplit_once(' ') {
        Some((k, "read")) => (k, AccessKind::Read),
        Some((k, "write")) => (k, AccessKind::Write),
        Some((k, "access")) => (k, AccessKind::Unknown),
        _ => (what, AccessKind::Unknown),
    };
    let kind = match head_kind {
        "Use-after-free" => Some(ErrorKind::UseAfterFree),
        "Out-of-bounds" => None,
        "Double-free" => Some(ErrorKind::DoubleFree),
        "Invalid free" => Some(ErrorKind::InvalidFree),
        "Indeterminate guard hit" => Some(ErrorKind::IndeterminateGuardHit),
        other => return lines.err_here(format!("unknown error kind {other:?}")),
    };
    let fault_trace = parse_frames(&mut lines)?;
    if !lines.expect("blank line")?.is_empty() {
        lines.pos -= 1;
        return lines.err("expected blank line after the access trace");
    }

    let locator_line = lines.expect("access locator")?;
    let Some(locator) = locator_line.strip_prefix("The access is ") else {
        lines.pos -= 1;
        return lines.err("expected \"The access is ...\"");
    };
    let mut allocation_address = 0;
    let mut allocation_size = 0;
    let kind = if locator == UNATTRIBUTED {
        match kind {
            Some(k @ (ErrorKind::IndeterminateGuardHit | ErrorKind::InvalidFree)) => k,
            _ => {
                lines.pos -= 1;
                return lines.err("unattributed locator on an attributed error");
            }
        }
    } else {
        let bad = |lines: &mut Lines<'_>| {
            lines.pos -= 1;
            lines.err::<ErrorReport>(format!("malformed locator {locator:?}"))
        };
        let Some((place, tail)) = locator.split_once("B allocation at ") else {
            return bad(&mut lines);
        };
        let Some(at) = parse_hex(tail) else {
            return bad(&mut lines);
        };
        let (side, size) = if let Some(n) = place.strip_prefix("within ") {
            (Side::Within, n)
        } else if let Some((k, n)) = place.split_once("B left of ") {
            match k.parse() {
                Ok(k) => (Side::Left(k), n),
                Err(_) => return bad(&mut lines),
            }
        } else if let Some((k, n)) = place.split_once("B right of ") {
            match k.parse() {
                Ok(k) => (Side::Right(k), n),
                Err(_) => return bad(&mut lines),
            }
        } else {
            return bad(&mut lines);
        };
        let Ok(size) = size.parse::<usize>() else {
            return bad(&mut lines);
        };
        allocation_address = at;
        allocation_size = size;
        let probe = ErrorReport {
            kind: ErrorKind::UseAfterFree,
            access_address,
            access_kind,
            faulting_thread,
            fault_trace: StackTrace::new(),
            allocation_address,
            allocation_size,
            allocation: None,
            deallocation: None,
            metadata_lost: false,
        };
        let consistent = match (side, probe.locator()) {
            (Side::Within, Locator::Within(_)) => true,
            (Side::Left(a), Locator::Left(b)) | (Side::Right(a), Locator::Right(b)) => a == b,
            _ => false,
        };
        if !consistent {
            lines.pos -= 1;
            return lines.err(format!("locator {locator:?} disagrees with access address"));
        }
        match kind {
            Some(ErrorKind::IndeterminateGuardHit) => {
                lines.pos -= 1;
                return lines.err("indeterminate guard hit cannot be attributed");
            }
            Some(k) => k,
            None if matches!(side, Side::Left(_)) => ErrorKind::BufferUnderflow,
            None if matches!(side, Side::Right(_)) => ErrorKind::BufferOverflow,
            None => {
                lines.pos -= 1;
                return lines.err("out-of-bounds access inside the allocation");
            }
        }
    };

    let mut report = ErrorReport {
        kind,
        access_address,
        access_kind: if kind.is_free_error() {
            AccessKind::Unknown
        } else {
            access_kind
        },
        faulting_thread,
        fault_trace,
        allocation_address,
        allocation_size,
        allocation: None,
        deallocation: None,
        metadata_lost: false,
    };

    loop {
        let Some(line) = lines.next() else {
            return lines.err(format!("missing trailer {REPORT_TRAILER:?}"));
        };
        if line.trim_end() == REPORT_TRAILER {
            break;
        }
        if !line.is_empty() {
            lines.pos -= 1;
            return lines.err(format!("unexpected line {line:?}"));
        }
        let Some(block) = lines.next() else {
            return lines.err(format!("missing trailer {REPORT_TRAILER:?}"));
        };
        if block == METADATA_LOST {
            report.metadata_lost = true;
            continue;
        }
        let (head, thread) = parse_thread_suffix(&lines, block)?;
        let (addr, verb) = head.split_once(' ').unwrap_or((head, ""));
        if parse_hex(addr) != Some(report.allocation_address) {
            return lines.err(format!("block names {addr:?}, not the allocation"));
        }
        let frames = parse_frames(&mut lines)?;
        let record = Some(TraceRecord { thread, frames });
        match verb {
            "was deallocated" if report.deallocation.is_none() => report.deallocation = record,
            "was allocated" if report.allocation.is_none() => report.allocation = record,
            _ => return lines.err(format!("unexpected block {block:?}")),
        }
    }
    if let Some(extra) = lines.lines[lines.pos..].iter().find(|l| !l.trim().is_empty()) {
        return lines.err(format!("trailing text {extra:?}"));
    }
    Ok(report)
}

#[derive(Clone, Copy)]
enum Side {
    Within,
    Left(usize),
    Right(usize),
}

/// Splits a stream of concatenated reports.
pub fn split_reports(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(REPORT_HEADER) {
        let from = &rest[start..];
        match from.find(REPORT_TRAILER) {
            Some(end) => {
                let end = end + REPORT_TRAILER.len();
                out.push(&from[..end]);
                rest = &from[end..];
            }
            None => {
                out.push(from);
                break;
            }
        }
    }
    out
}

/// Renders into a fixed buffer, truncating on overflow. Returns false if
/// the text did not fit.
pub fn render_into<const N: usize>(
    report: &ErrorReport,
    modules: Option<&ModuleTable>,
    out: &mut ArrayString<N>,
) -> bool {
    let rendered = Rendered { report, modules };
    write!(out, "{rendered}").is_ok()
}
