//! Access-violation interception and report output.
//!
//! One process-wide `SIGSEGV`/`SIGBUS` handler serves every live allocator.
//! Allocators register themselves in a fixed table; the handler asks each in
//! turn whether the faulting address is in its pool and chains to the
//! previously installed disposition when none claims it. Code that takes
//! the signals over later (the Rust runtime does so during startup, which
//! may be after the global allocator's first allocation) is displaced again
//! from the allocation path and becomes the chained disposition.
//!
//! Everything reachable from the handler avoids the heap and blocking locks.
//! Report output is serialized by a spin permit so concurrent reports never
//! interleave.

use std::cell::{Cell, UnsafeCell};
use std::fmt::{self, Write as _};
use std::mem::MaybeUninit;
use std::os::fd::RawFd;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Mutex, Once};

use crate::report::{AccessKind, ErrorReport, ModuleTable, Rendered};
use crate::shim::Guardian;

/// Where rendered reports go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportSink {
    Stderr,
    /// A descriptor that stays open for the allocator's lifetime.
    Fd(RawFd),
    /// An in-memory buffer of the given size, read back through
    /// [`GuardianAllocator::reports`](crate::GuardianAllocator::reports).
    Capture { capacity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReporterConfig {
    /// Report once, then unprotect the page, disable the allocator and let
    /// the program continue.
    pub recoverable: bool,
    pub sink: ReportSink,
    /// Annotate frames with `module(+offset)`.
    pub module_offsets: bool,
}

impl Default for ReporterConfig {
    fn default() -> Self {
        Self {
            recoverable: false,
            sink: ReportSink::Stderr,
            module_offsets: true,
        }
    }
}

pub const DEFAULT_CAPTURE_CAPACITY: usize = 256 << 10;

/// Register state of an interrupted thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultContext {
    pub pc: usize,
    pub fp: usize,
    pub sp: usize,
    /// Page-fault error code when the platform exposes one.
    pub error_code: Option<u64>,
}

impl FaultContext {
    /// Reads the registers out of a signal handler's `ucontext_t`.
    ///
    /// # Safety
    /// `uc` must be null or the context pointer passed to an `SA_SIGINFO`
    /// handler.
    pub unsafe fn from_ucontext(uc: *const libc::c_void) -> Self {
        if uc.is_null() {
            return Self::default();
        }
        #[cfg(all(target_os = "linux", target_arch = "x86_64"))]
        {
            let uc = &*(uc as *const libc::ucontext_t);
            let g = &uc.uc_mcontext.gregs;
            Self {
                pc: g[libc::REG_RIP as usize] as usize,
                fp: g[libc::REG_RBP as usize] as usize,
                sp: g[libc::REG_RSP as usize] as usize,
                error_code: Some(g[libc::REG_ERR as usize] as u64),
            }
        }
        #[cfg(all(target_os = "linux", target_arch = "aarch64"))]
        {
            let uc = &*(uc as *const libc::ucontext_t);
            let m = &uc.uc_mcontext;
            Self {
                pc: m.pc as usize,
                fp: m.regs[29] as usize,
                sp: m.sp as usize,
                error_code: None,
            }
        }
        #[cfg(not(all(target_os = "linux", any(target_arch = "x86_64", target_arch = "aarch64"))))]
        {
            Self::default()
        }
    }
}

/// Read or write, from the page-fault error code (bit 1 set on writes).
pub fn determine_access_kind(ctx: &FaultContext) -> AccessKind {
    match ctx.error_code {
        Some(code) if code & 0x2 != 0 => AccessKind::Write,
        Some(_) => AccessKind::Read,
        None => AccessKind::Unknown,
    }
}

/// What the handler does once a guardian has dealt with a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultOutcome {
    /// Return and re-execute the faulting instruction.
    Resume,
    /// Restore the default disposition and re-fault, terminating with the
    /// original signal.
    Terminate,
}

static PERMIT: AtomicBool = AtomicBool::new(false);

/// Exclusive right to emit a report. Spins; never sleeps, so it may be
/// taken from a signal handler.
pub(crate) struct ReportPermit(());

impl ReportPermit {
    pub(crate) fn acquire() -> Self {
        while PERMIT
            .compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            std::hint::spin_loop();
        }
        ReportPermit(())
    }
}

impl Drop for ReportPermit {
    fn drop(&mut self) {
        PERMIT.store(false, Ordering::Release);
    }
}

/// Pre-allocated report buffer.
pub(crate) struct CaptureBuffer {
    bytes: Box<[AtomicU8]>,
    len: AtomicUsize,
    dropped: AtomicUsize,
}

impl CaptureBuffer {
    pub(crate) fn new(capacity: usize) -> Self {
        Self {
            bytes: (0..capacity).map(|_| AtomicU8::new(0)).collect(),
            len: AtomicUsize::new(0),
            dropped: AtomicUsize::new(0),
        }
    }

    pub(crate) fn text(&self) -> String {
        let _permit = ReportPermit::acquire();
        let len = self.len.load(Ordering::Acquire);
        let bytes: Vec<u8> = self.bytes[..len]
            .iter()
            .map(|b| b.load(Ordering::Relaxed))
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub(crate) fn dropped(&self) -> usize {
        self.dropped.load(Ordering::Relaxed)
    }

    pub(crate) fn clear(&self) {
        let _permit = ReportPermit::acquire();
        self.len.store(0, Ordering::Release);
    }
}

struct CaptureWriter<'a> {
    buf: &'a CaptureBuffer,
    pos: usize,
}

impl fmt::Write for CaptureWriter<'_> {
    fn write_str(&mut self, s: &str) -> fmt::Result {
        let end = self.pos + s.len();
        if end > self.buf.bytes.len() {
            return Err(fmt::Error);
        }
        for (cell, &b) in self.buf.bytes[self.pos..end].iter().zip(s.as_bytes()) {
            cell.store(b, Ordering::Relaxed);
        }
        self.pos = end;
        Ok(())
    }
}

/// Buffered `write(2)` formatter.
struct FdWriter {
    fd: RawFd,
    buf: [u8; 512],
    len: usize,
}

impl FdWriter {
    fn new(fd: RawFd) -> Self {
        Self {
            fd,
            buf: [0; 512],
            len: 0,
        }
    }

    fn flush(&mut self) {
        let mut off = 0;
        while off < self.len {
            // SAFETY: writing initialized bytes from our buffer.
            let n = unsafe {
                libc::write(self.fd, self.buf[off..].as_ptr().cast(), self.len - off)
            };
            if n <= 0 {
                if n < 0 && errno() == libc::EINTR {
                    continue;
                }
                break;
            }
            off += n as usize;
        }
        self.len = 0;
    }
}

impl fmt::Write for FdWriter {
    fn write_str(&mut self, s: &str) -> fmt::Result {
        for chunk in s.as_bytes().chunks(self.buf.len()) {
            if self.len + chunk.len() > self.buf.len() {
                self.flush();
            }
            self.buf[self.len..self.len + chunk.len()].copy_from_slice(chunk);
            self.len += chunk.len();
        }
        Ok(())
    }
}

/// Destination of one allocator's reports.
pub(crate) struct ReportOutput {
    sink: ReportSink,
    capture: Option<CaptureBuffer>,
    modules: Option<Box<ModuleTable>>,
}

impl ReportOutput {
    pub(crate) fn new(config: &ReporterConfig) -> Self {
        Self {
            sink: config.sink,
            capture: match config.sink {
                ReportSink::Capture { capacity } => Some(CaptureBuffer::new(capacity)),
                _ => None,
            },
            modules: config.module_offsets.then(|| Box::new(ModuleTable::current())),
        }
    }

    pub(crate) fn capture(&self) -> Option<&CaptureBuffer> {
        self.capture.as_ref()
    }

    /// Writes one whole report. Async-signal-safe.
    pub(crate) fn emit(&self, report: &ErrorReport) {
        let rendered = Rendered::new(report, self.modules.as_deref());
        let _permit = ReportPermit::acquire();
        match self.sink {
            ReportSink::Stderr => write_fd(libc::STDERR_FILENO, &rendered),
            ReportSink::Fd(fd) => write_fd(fd, &rendered),
            ReportSink::Capture { .. } => {
                let Some(buf) = &self.capture else { return };
                let start = buf.len.load(Ordering::Relaxed);
                let mut w = CaptureWriter { buf, pos: start };
                if write!(w, "{rendered}").is_ok() {
                    buf.len.store(w.pos, Ordering::Release);
                } else {
                    buf.dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
}

fn write_fd(fd: RawFd, rendered: &Rendered<'_>) {
    let mut w = FdWriter::new(fd);
    let _ = write!(w, "{rendered}");
    w.flush();
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

#[cfg(target_os = "linux")]
fn errno_location() -> *mut libc::c_int {
    // SAFETY: always valid for the calling thread.
    unsafe { libc::__errno_location() }
}

#[cfg(not(target_os = "linux"))]
fn errno_location() -> *mut libc::c_int {
    // SAFETY: always valid for the calling thread.
    unsafe { libc::__error() }
}

pub const MAX_GUARDIANS: usize = 256;

#[allow(clippy::declare_interior_mutable_const)]
const EMPTY_ENTRY: AtomicPtr<Guardian> = AtomicPtr::new(ptr::null_mut());
static REGISTRY: [AtomicPtr<Guardian>; MAX_GUARDIANS] = [EMPTY_ENTRY; MAX_GUARDIANS];
/// Handler invocations currently looking at the registry.
static ACTIVE: AtomicUsize = AtomicUsize::new(0);

const SIGNALS: [libc::c_int; 2] = [libc::SIGSEGV, libc::SIGBUS];

/// Reinstallations after the first that are honoured; later takeovers of
/// the signals are left alone.
const MAX_GENERATIONS: usize = 8;

/// The dispositions our handler displaced, one generation per
/// installation. A generation is filled before it is published through
/// `current` and never written again, so the handler can read it without
/// locking.
struct PreviousActions {
    generations: UnsafeCell<[[MaybeUninit<libc::sigaction>; 2]; MAX_GENERATIONS]>,
    /// Number of published generations; the newest is `current - 1`.
    current: AtomicUsize,
}

// SAFETY: see the type documentation.
unsafe impl Sync for PreviousActions {}

static PREVIOUS: PreviousActions = PreviousActions {
    generations: UnsafeCell::new([[MaybeUninit::uninit(), MaybeUninit::uninit()]; MAX_GENERATIONS]),
    current: AtomicUsize::new(0),
};
static INSTALL: Mutex<()> = Mutex::new(());
static PROBE: Once = Once::new();

thread_local! {
    /// Set while this thread runs a chained handler, to break cycles with
    /// handlers that chain back to us.
    static IN_CHAIN: Cell<bool> = const { Cell::new(false) };
}

fn is_ours(action: &libc::sigaction) -> bool {
    action.sa_sigaction == on_fault as *const () as usize
}

/// Installs the handler, or puts it back if other code has replaced it for
/// either signal since. The displaced disposition becomes the one faults
/// outside every pool are forwarded to.
pub(crate) fn ensure_installed() {
    PROBE.call_once(crate::platform::init_probe);
    let _lock = INSTALL.lock().unwrap_or_else(|e| e.into_inner());
    let generation = PREVIOUS.current.load(Ordering::Acquire);
    // SAFETY: plain sigaction calls; only unpublished generations are
    // written, and only under INSTALL.
    unsafe {
        let mut now: [libc::sigaction; 2] = std::mem::zeroed();
        for (i, &sig) in SIGNALS.iter().enumerate() {
            libc::sigaction(sig, ptr::null(), &mut now[i]);
        }
        if now.iter().all(is_ours) || generation == MAX_GENERATIONS {
            return;
        }
        let generations = &mut *PREVIOUS.generations.get();
        for i in 0..SIGNALS.len() {
            let displaced = if is_ours(&now[i]) {
                // Still ours, so an earlier generation exists.
                *generations[generation - 1][i].assume_init_ref()
            } else {
                now[i]
            };
            generations[generation][i].write(displaced);
        }
        PREVIOUS.current.store(generation + 1, Ordering::Release);

        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = on_fault as *const () as usize;
        action.sa_flags = libc::SA_SIGINFO;
        libc::sigemptyset(&mut action.sa_mask);
        for (i, &sig) in SIGNALS.iter().enumerate() {
            if !is_ours(&now[i]) {
                libc::sigaction(sig, &action, ptr::null_mut());
            }
        }
    }
}

/// Adds a guardian to the handler's table. Returns its entry index.
pub(crate) fn register(guardian: *const Guardian) -> Option<usize> {
    ensure_installed();
    REGISTRY.iter().position(|entry| {
        entry
            .compare_exchange(
                ptr::null_mut(),
                guardian as *mut Guardian,
                Ordering::SeqCst,
                Ordering::SeqCst,
            )
            .is_ok()
    })
}

/// Removes a guardian and waits until no handler can still be using it.
pub(crate) fn unregister(index: usize) {
    REGISTRY[index].store(ptr::null_mut(), Ordering::SeqCst);
    while ACTIVE.load(Ordering::SeqCst) != 0 {
        std::thread::yield_now();
    }
}

/// Puts back the default disposition so that returning re-raises `sig`
/// fatally.
fn reset_to_default(sig: libc::c_int) {
    // SAFETY: plain sigaction call.
    unsafe {
        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = libc::SIG_DFL;
        libc::sigemptyset(&mut action.sa_mask);
        libc::sigaction(sig, &action, ptr::null_mut());
    }
}

unsafe fn chain(sig: libc::c_int, info: *mut libc::siginfo_t, uc: *mut libc::c_void) {
    let index = SIGNALS.iter().position(|&s| s == sig);
    let generation = PREVIOUS.current.load(Ordering::Acquire);
    let previous = match index {
        Some(i) if generation > 0 => Some((*PREVIOUS.generations.get())[generation - 1][i].assume_init_ref()),
        _ => None,
    };
    let Some(prev) = previous else {
        reset_to_default(sig);
        return;
    };
    let handler = prev.sa_sigaction;
    if handler == libc::SIG_DFL || handler == libc::SIG_IGN {
        // An ignored SIGSEGV would re-fault forever; fall back to default.
        reset_to_default(sig);
    } else if IN_CHAIN.get() {
        // The chained handler forwarded the fault back to us.
        reset_to_default(sig);
    } else {
        IN_CHAIN.set(true);
        if prev.sa_flags & libc::SA_SIGINFO != 0 {
            let f: extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void) =
                std::mem::transmute(handler);
            f(sig, info, uc);
        } else {
            let f: extern "C" fn(libc::c_int) = std::mem::transmute(handler);
            f(sig);
        }
        IN_CHAIN.set(false);
    }
}

extern "C" fn on_fault(sig: libc::c_int, info: *mut libc::siginfo_t, uc: *mut libc::c_void) {
    let errno_ptr = errno_location();
    // SAFETY: errno is thread-local and always valid.
    let saved_errno = unsafe { *errno_ptr };
    // SAFETY: the kernel passes valid siginfo and context pointers.
    let addr = unsafe { (*info).si_addr() } as usize;

    ACTIVE.fetch_add(1, Ordering::SeqCst);
    let mut outcome = None;
    for entry in &REGISTRY {
        let p = entry.load(Ordering::SeqCst);
        if p.is_null() {
            continue;
        }
        // SAFETY: entries stay valid while ACTIVE is non-zero.
        let guardian = unsafe { &*p };
        if guardian.owns(addr) {
            // SAFETY: uc comes from the kernel.
            let ctx = unsafe { FaultContext::from_ucontext(uc) };
            outcome = Some(guardian.handle_fault(addr, &ctx));
            break;
        }
    }
    ACTIVE.fetch_sub(1, Ordering::SeqCst);

    match outcome {
        Some(FaultOutcome::Resume) => {}
        Some(FaultOutcome::Terminate) => reset_to_default(sig),
        // SAFETY: forwarding the kernel's arguments.
        None => unsafe { chain(sig, info, uc) },
    }
    // SAFETY: as above.
    unsafe { *errno_ptr = saved_errno };
}
