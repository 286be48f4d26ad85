//! Fault injection.
//!
//! Each injection obtains one guarded allocation and commits exactly one
//! bug against it. Non-recoverable injections run in a child process so the
//! harness survives the intended crash; recoverable ones run in-process and
//! read the report back from the capture buffer.

use std::hint::black_box;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::ptr;
use std::time::{Duration, Instant};

use clap::{Args, ValueEnum};
use gwpasan::report::split_reports;
use gwpasan::{
    parse_report, AccessKind, AlignmentPolicy, ErrorKind, ErrorReport, GuardianAllocator,
    HostAllocator, Locator,
};

use crate::options::{
    Format, HarnessConfig, HarnessError, Policy, Record, EXIT_FAILURE, EXIT_OK, EXIT_UNDETECTED,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BugKind {
    Uaf,
    Overflow,
    Underflow,
    DoubleFree,
    InvalidFree,
}

impl BugKind {
    pub fn expected(self) -> ErrorKind {
        match self {
            BugKind::Uaf => ErrorKind::UseAfterFree,
            BugKind::Overflow => ErrorKind::BufferOverflow,
            BugKind::Underflow => ErrorKind::BufferUnderflow,
            BugKind::DoubleFree => ErrorKind::DoubleFree,
            BugKind::InvalidFree => ErrorKind::InvalidFree,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BugKind::Uaf => "uaf",
            BugKind::Overflow => "overflow",
            BugKind::Underflow => "underflow",
            BugKind::DoubleFree => "double-free",
            BugKind::InvalidFree => "invalid-free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct InjectOptions {
    #[arg(value_enum)]
    pub kind: BugKind,
    /// Distance of the bad access: offset into the freed block (uaf), bytes
    /// past the end (overflow, 1 = first byte past), bytes before the start
    /// (underflow) or offset of the freed pointer (invalid-free).
    #[arg(long)]
    pub bytes: Option<usize>,
    #[arg(long, default_value_t = 41)]
    pub size: usize,
    /// Slot-page placement of the allocation.
    #[arg(long, value_enum)]
    pub align_side: Option<Side>,
    #[arg(long, value_enum)]
    pub access: Option<Access>,
}

impl InjectOptions {
    pub fn new(kind: BugKind) -> Self {
        Self {
            kind,
            bytes: None,
            size: 41,
            align_side: None,
            access: None,
        }
    }

    pub fn bytes(&self) -> usize {
        self.bytes.unwrap_or(match self.kind {
            BugKind::Uaf => 8,
            BugKind::Underflow => 2,
            BugKind::Overflow | BugKind::InvalidFree | BugKind::DoubleFree => 1,
        })
    }

    pub fn side(&self) -> Side {
        self.align_side.unwrap_or(match self.kind {
            BugKind::Overflow => Side::Right,
            _ => Side::Left,
        })
    }

    pub fn access(&self) -> Access {
        self.access.unwrap_or(match self.kind {
            BugKind::Underflow => Access::Read,
            _ => Access::Write,
        })
    }

    pub fn alignment(&self) -> AlignmentPolicy {
        match self.side() {
            Side::Left => AlignmentPolicy::Left,
            Side::Right => AlignmentPolicy::Right,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let page = gwpasan::platform::page_size();
        if self.size == 0 || self.size > page {
            return Err(HarnessError::Config(format!("--size must be in 1..={page}")));
        }
        if self.bytes() == 0 && matches!(self.kind, BugKind::Overflow | BugKind::Underflow) {
            return Err(HarnessError::Config("--bytes must be positive".into()));
        }
        Ok(())
    }

    fn to_args(&self) -> Vec<String> {
        let mut out = vec![
            self.kind.name().to_string(),
            "--size".into(),
            self.size.to_string(),
            "--bytes".into(),
            self.bytes().to_string(),
            "--align-side".into(),
            match self.side() {
                Side::Left => "left".into(),
                Side::Right => "right".into(),
            },
        ];
        out.extend([
            "--access".into(),
            match self.access() {
                Access::Read => "read".into(),
                Access::Write => "write".into(),
            },
        ]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    InProcess,
    Exited(i32),
    Signaled(i32),
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::InProcess => f.write_str("in-process"),
            Termination::Exited(c) => write!(f, "exit:{c}"),
            Termination::Signaled(s) => write!(f, "signal:{s}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InjectResult {
    pub options: InjectOptions,
    pub reports: Vec<ErrorReport>,
    pub report_text: String,
    pub termination: Termination,
}

impl InjectResult {
    pub fn report(&self) -> Option<&ErrorReport> {
        self.reports.first()
    }

    pub fn exit_code(&self) -> i32 {
        match self.report() {
            None => EXIT_UNDETECTED,
            Some(r) if r.kind == self.options.kind.expected() && self.reports.len() == 1 => EXIT_OK,
            Some(_) => EXIT_FAILURE,
        }
    }

    pub fn render(&self, format: Format) -> String {
        let o = &self.options;
        match format {
            Format::Human => {
                let mut out = self.report_text.clone();
                let summary = match self.report() {
                    Some(r) => format!(
                        "inject {}: detected {} ({}), expected {}; {} report(s), {}",
                        o.kind.name(),
                        r.kind,
                        locator_text(r),
                        o.kind.expected(),
                        self.reports.len(),
                        termination_text(self.termination),
                    ),
                    None => format!(
                        "inject {}: NOT detected; the access never reached a guard page ({})",
                        o.kind.name(),
                        termination_text(self.termination),
                    ),
                };
                out.push_str(&summary);
                out.push('\n');
                out
            }
            Format::Records => {
                let mut rec = Record::new("inject")
                    .field("kind", o.kind.name())
                    .field("expected", o.kind.expected())
                    .field("detected", u8::from(self.report().is_some()));
                if let Some(r) = self.report() {
                    rec = rec
                        .field("error", r.kind)
                        .field("access", access_name(r))
                        .field("locator", locator_record(r.locator()))
                        .field("size", r.allocation_size)
                        .field("metadata_lost", u8::from(r.metadata_lost));
                }
                rec = rec
                    .field("reports", self.reports.len())
                    .field("termination", self.termination)
                    .field("exit", self.exit_code());
                format!("{rec}\n")
            }
        }
    }
}

fn termination_text(t: Termination) -> String {
    match t {
        Termination::InProcess => "recovered in-process".into(),
        Termination::Exited(c) => format!("child exited with status {c}"),
        Termination::Signaled(s) => format!("child killed by signal {s}"),
    }
}

fn access_name(r: &ErrorReport) -> &'static str {
    if r.kind.is_free_error() {
        return "free";
    }
    match r.access_kind {
        AccessKind::Read => "read",
        AccessKind::Write => "write",
        AccessKind::Unknown => "unknown",
    }
}

fn locator_text(r: &ErrorReport) -> String {
    match r.locator() {
        Locator::Within(o) => format!("offset {o} in {}B allocation", r.allocation_size),
        Locator::Left(n) => format!("{n}B left of {}B allocation", r.allocation_size),
        Locator::Right(n) => format!("{n}B right of {}B allocation", r.allocation_size),
        Locator::Unattributed => "no adjacent allocation".into(),
    }
}

pub fn locator_record(l: Locator) -> String {
    match l {
        Locator::Within(o) => format!("within:{o}"),
        Locator::Left(n) => format!("left:{n}"),
        Locator::Right(n) => format!("right:{n}"),
        Locator::Unattributed => "unattributed".into(),
    }
}

/// Allocates until the sampler routes a request to the pool. Unguarded
/// attempts are freed again.
pub fn guarded_allocation<H: HostAllocator>(
    a: &GuardianAllocator<H>,
    size: usize,
    policy: Policy,
    wait: Duration,
) -> Result<*mut u8, HarnessError> {
    if !a.is_enabled() {
        return Err(HarnessError::Failed(
            a.init_error().map_or("the tool is disabled in this process".into(), |e| {
                format!("guarded pool unavailable: {e}")
            }),
        ));
    }
    let deadline = Instant::now() + wait;
    let mut attempts = 0u64;
    loop {
        let p = a.malloc(size, 1);
        if a.is_guarded(p) {
            return Ok(p);
        }
        // SAFETY: p came from this allocator and is not used again.
        unsafe { a.free(p) };
        attempts += 1;
        let gave_up = match policy {
            Policy::Counter => attempts >= 1 << 24,
            Policy::Timer => Instant::now() >= deadline,
        };
        if gave_up {
            return Err(HarnessError::Failed(format!(
                "no guarded allocation after {attempts} attempts"
            )));
        }
        if policy == Policy::Timer {
            std::thread::sleep(Duration::from_millis(1));
        }
    }
}

#[inline(never)]
fn touch(p: *mut u8, access: Access) {
    // SAFETY: deliberately invalid; the guarded pool either faults or the
    // byte is slack inside an accessible slot page.
    unsafe {
        match access {
            Access::Read => {
                black_box(ptr::read_volatile(p));
            }
            Access::Write => ptr::write_volatile(p, 0x5a),
        }
    }
}

/// Commits the bug described by `o` against a fresh guarded allocation.
pub fn trigger<H: HostAllocator>(
    a: &GuardianAllocator<H>,
    o: &InjectOptions,
    config: &HarnessConfig,
) -> Result<(), HarnessError> {
    let wait = Duration::from_millis(config.sample_interval_ms.saturating_mul(4)) + Duration::from_secs(1);
    let p = guarded_allocation(a, o.size, config.policy, wait)?;
    let bytes = o.bytes();
    // SAFETY: p is a live guarded allocation of o.size bytes; the frees
    // below are the injected bugs and are validated by the pool.
    unsafe {
        ptr::write_bytes(p, 0xab, o.size);
        match o.kind {
            BugKind::Uaf => {
                a.free(p);
                touch(p.wrapping_add(bytes), o.access());
            }
            BugKind::Overflow => {
                touch(p.wrapping_add(o.size - 1 + bytes), o.access());
                a.free(p);
            }
            BugKind::Underflow => {
                touch(p.wrapping_sub(bytes), o.access());
                a.free(p);
            }
            BugKind::DoubleFree => {
                a.free(p);
                a.free(black_box(p));
            }
            BugKind::InvalidFree => {
                a.free(black_box(p.wrapping_add(bytes)));
                a.free(p);
            }
        }
    }
    Ok(())
}

/// Runs one injection inside this process with a recoverable allocator.
pub fn run_in_process(config: &HarnessConfig, o: &InjectOptions) -> Result<InjectResult, HarnessError> {
    o.validate()?;
    let config = HarnessConfig {
        recoverable: true,
        ..config.clone()
    };
    let a = GuardianAllocator::new(config.guardian_config(1, o.alignment())?)?;
    trigger(&a, o, &config)?;
    Ok(InjectResult {
        options: o.clone(),
        reports: a.reports(),
        report_text: a.report_text(),
        termination: Termination::InProcess,
    })
}

/// Entry point of the hidden child subcommand: reports go to stderr and a
/// detected bug ends the process.
pub fn run_child(config: &HarnessConfig, o: &InjectOptions) -> Result<(), HarnessError> {
    o.validate()?;
    let a = GuardianAllocator::new(config.guardian_config(1, o.alignment())?)?;
    trigger(&a, o, config)
}

/// Runs one injection in a child process started from `exe`.
pub fn run_in_child(exe: &Path, config: &HarnessConfig, o: &InjectOptions) -> Result<InjectResult, HarnessError> {
    o.validate()?;
    let child_config = HarnessConfig {
        recoverable: false,
        ..config.clone()
    };
    // Surface configuration errors here rather than as a child failure.
    child_config.guardian_config(1, o.alignment())?;
    let output = Command::new(exe)
        .arg("inject-child")
        .args(o.to_args())
        .args(child_config.to_args())
        .stdin(Stdio::null())
        .output()
        .map_err(|e| HarnessError::Failed(format!("cannot start {}: {e}", exe.display())))?;
    let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
    let termination = termination_of(output.status);
    let mut reports = Vec::new();
    let mut report_text = String::new();
    for text in split_reports(&stderr) {
        let report = parse_report(text)
            .map_err(|e| HarnessError::Failed(format!("child emitted an unparsable report: {e}\n{stderr}")))?;
        reports.push(report);
        report_text.push_str(text);
        if !text.ends_with('\n') {
            report_text.push('\n');
        }
    }
    if reports.is_empty() && termination != Termination::Exited(0) {
        return Err(HarnessError::Failed(format!(
            "child failed without a report ({}):\n{stderr}",
            termination_text(termination)
        )));
    }
    Ok(InjectResult {
        options: o.clone(),
        reports,
        report_text,
        termination,
    })
}

fn termination_of(status: ExitStatus) -> Termination {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => Termination::Exited(c),
        (None, Some(s)) => Termination::Signaled(s),
        (None, None) => Termination::Exited(-1),
    }
}

/// Runs an injection the way the `inject` subcommand does.
pub fn run(exe: &Path, config: &HarnessConfig, o: &InjectOptions) -> Result<InjectResult, HarnessError> {
    if config.recoverable {
        run_in_process(config, o)
    } else {
        run_in_child(exe, config, o)
    }
}

