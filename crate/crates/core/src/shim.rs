//! Allocator front end.
//!
//! [`Guardian`] owns one pool with its sampler, metadata and reporter, and
//! implements the guarded paths. [`GuardianAllocator`] puts it in front of a
//! [`HostAllocator`]: unsampled requests cost one thread-local decrement and
//! a branch before being forwarded, and frees cost one range check.

use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::coverage::{self, CoverageFilter, CoverageSource};
use crate::handler::{self, FaultContext, FaultOutcome, ReportOutput, ReporterConfig};
use crate::metadata::MetadataStore;
use crate::platform;
use crate::pool::{Acquired, AddressClass, GuardedPool, PoolConfig, PoolError, PoolStats, SlotState};
use crate::report::{self, AccessKind, ErrorKind, ErrorReport, TraceRecord};
use crate::rng::{self, XorShift64Star};
use crate::sampler::{self, CounterSamplerConfig, ProcessSamplingConfig, TimerGate, TimerThread};
use crate::trace::{self, StackTrace, MAX_FRAMES};

pub const DEFAULT_SAMPLE_RATE: u32 = 5000;

const HANDLER_CHECK_EARLY: u64 = 64;
const HANDLER_CHECK_PERIOD: u64 = 64;

/// Alignment the host allocator guarantees without an explicit request.
pub const HOST_MIN_ALIGNMENT: usize = 16;

#[derive(Debug, Clone)]
pub enum SamplingPolicy {
    Counter(CounterSamplerConfig),
    /// A background thread arms the gate once per interval.
    Timer { interval: Duration },
    /// The caller arms the gate, e.g. from a schedule on a mock clock.
    Gate(Arc<TimerGate>),
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy::Counter(CounterSamplerConfig::new(DEFAULT_SAMPLE_RATE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageConfig {
    pub counters: usize,
    pub hashes: u32,
    pub utilization_threshold: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            counters: coverage::DEFAULT_COUNTERS,
            hashes: coverage::DEFAULT_HASHES,
            utilization_threshold: coverage::DEFAULT_UTILIZATION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuardianConfig {
    pub pool: PoolConfig,
    pub policy: SamplingPolicy,
    pub process_sampling: ProcessSamplingConfig,
    /// Entropy for the process-sampling draw; fresh when `None`.
    pub process_entropy: Option<u64>,
    /// Metadata records kept; defaults to the slot count.
    pub metadata_capacity: Option<usize>,
    pub max_frames: usize,
    /// Enables the allocation-site coverage policy.
    pub coverage: Option<CoverageConfig>,
    pub reporter: ReporterConfig,
}

impl Default for GuardianConfig {
    fn default() -> Self {
        Self {
            pool: PoolConfig::default(),
            policy: SamplingPolicy::default(),
            process_sampling: ProcessSamplingConfig::ALWAYS,
            process_entropy: None,
            metadata_capacity: None,
            max_frames: MAX_FRAMES,
            coverage: None,
            reporter: ReporterConfig::default(),
        }
    }
}

impl GuardianConfig {
    pub fn validate(&self) -> Result<(), GuardianError> {
        self.pool.validate()?;
        let invalid = |m: &str| Err(GuardianError::InvalidConfig(m.into()));
        match &self.policy {
            SamplingPolicy::Counter(c) if c.sample_rate == 0 => return invalid("sample rate must be at least 1"),
            SamplingPolicy::Timer { interval } if interval.is_zero() => {
                return invalid("sample interval must be positive")
            }
            _ => {}
        }
        if self.metadata_capacity == Some(0) {
            return invalid("metadata capacity must be positive");
        }
        if self.max_frames > MAX_FRAMES {
            return invalid(&format!("max frames is at most {MAX_FRAMES}"));
        }
        if self.process_sampling.denominator == 0 {
            return invalid("process sampling denominator must be positive");
        }
        if let Some(c) = &self.coverage {
            if c.counters == 0 || c.hashes == 0 || !(0.0..=1.0).contains(&c.utilization_threshold) {
                return invalid("coverage filter parameters out of range");
            }
        }
        if let handler::ReportSink::Capture { capacity: 0 } = self.reporter.sink {
            return invalid("capture capacity must be positive");
        }
        Ok(())
    }

    /// The one-time process-sampling draw.
    pub fn enabled_for_process(&self) -> bool {
        let entropy = self.process_entropy.unwrap_or_else(sampler::entropy);
        sampler::process_sampling_decision(self.process_sampling, entropy)
    }
}

#[derive(Debug, Error)]
pub enum GuardianError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("no free entry in the fault handler table")]
    TooManyInstances,
    #[error("cannot start the sampling timer: {0}")]
    Timer(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GuardianStats {
    /// Allocations the sampler selected.
    pub sampled: u64,
    /// Sampled allocations placed in the pool.
    pub guarded: u64,
    /// Sampled allocations of size zero or larger than a page.
    pub unsupported: u64,
    pub coverage_rejections: u64,
    /// Sampled allocations refused by the pool (capacity, quarantine).
    pub pool_unavailable: u64,
    pub guarded_frees: u64,
    pub reports: u64,
    /// Faults absorbed silently after recovery disabled the allocator.
    pub silent_recoveries: u64,
    pub disabled: bool,
    pub live: usize,
    pub pool: PoolStats,
}

#[derive(Default)]
struct Counters {
    sampled: AtomicU64,
    guarded: AtomicU64,
    unsupported: AtomicU64,
    coverage_rejections: AtomicU64,
    pool_unavailable: AtomicU64,
    guarded_frees: AtomicU64,
    reports: AtomicU64,
    silent_recoveries: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

struct CoverageState {
    filter: CoverageFilter,
    sources: Box<[Option<CoverageSource>]>,
}

enum Policy {
    Counter { rate: u32, seed: u64, threads: AtomicU64 },
    Gate(Arc<TimerGate>),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // Allocations left until the next sample, counting the next one. Starts
    // at 1 so the first allocation takes the slow path and draws a value.
    static SKIP: std::cell::Cell<u32> = const { std::cell::Cell::new(1) };
    static SKIP_OWNER: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
    static SKIP_RNG: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// One guarded pool and everything needed to detect and report errors in
/// it.
pub struct Guardian {
    id: u64,
    pool: GuardedPool,
    store: MetadataStore,
    policy: Policy,
    timer: Option<TimerThread>,
    coverage: Option<Mutex<CoverageState>>,
    recoverable: bool,
    output: ReportOutput,
    disabled: AtomicBool,
    counters: Counters,
    max_frames: usize,
    registry_index: usize,
}

impl Guardian {
    /// Reserves the pool and registers with the fault handler. Ignores
    /// process sampling; see [`GuardianConfig::enabled_for_process`].
    pub fn new(config: &GuardianConfig) -> Result<Box<Self>, GuardianError> {
        config.validate()?;
        let pool = GuardedPool::new(config.pool.clone())?;
        let capacity = config.metadata_capacity.unwrap_or(config.pool.slot_count);
        let store = MetadataStore::new(capacity, config.max_frames);
        let mut timer = None;
        let policy = match &config.policy {
            SamplingPolicy::Counter(c) => Policy::Counter {
                rate: c.sample_rate.max(1),
                seed: c.rng_seed.unwrap_or_else(sampler::entropy),
                threads: AtomicU64::new(0),
            },
            SamplingPolicy::Timer { interval } => {
                let gate = Arc::new(TimerGate::new());
                timer = Some(TimerThread::spawn(Arc::clone(&gate), *interval).map_err(GuardianError::Timer)?);
                Policy::Gate(gate)
            }
            SamplingPolicy::Gate(gate) => Policy::Gate(Arc::clone(gate)),
        };
        let coverage = config.coverage.map(|c| {
            Mutex::new(CoverageState {
                filter: CoverageFilter::new(c.counters, c.hashes, c.utilization_threshold),
                sources: vec![None; config.pool.slot_count].into_boxed_slice(),
            })
        });
        let mut guardian = Box::new(Guardian {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            pool,
            store,
            policy,
            timer,
            coverage,
            recoverable: config.reporter.recoverable,
            output: ReportOutput::new(&config.reporter),
            disabled: AtomicBool::new(false),
            counters: Counters::default(),
            max_frames: config.max_frames,
            registry_index: usize::MAX,
        });
        guardian.registry_index =
            handler::register(&*guardian as *const Guardian).ok_or(GuardianError::TooManyInstances)?;
        // A fresh allocator starts this thread's counter from its own seed.
        SKIP.set(1);
        SKIP_OWNER.set(0);
        Ok(guardian)
    }

    pub fn pool(&self) -> &GuardedPool {
        &self.pool
    }

    pub fn metadata(&self) -> &MetadataStore {
        &self.store
    }

    /// Constant-time ownership test on the pointer value alone.
    #[inline(always)]
    pub fn owns(&self, addr: usize) -> bool {
        self.pool.contains(addr)
    }

    pub fn is_disabled(&self) -> bool {
        self.disabled.load(Ordering::Acquire)
    }

    pub fn is_recoverable(&self) -> bool {
        self.recoverable
    }

    pub fn timer_running(&self) -> bool {
        self.timer.is_some()
    }

    /// The sampling decision for one allocation.
    #[inline(always)]
    pub fn want_to_sample(&self) -> bool {
        match &self.policy {
            Policy::Counter { .. } => self.counter_tick(),
            Policy::Gate(gate) => gate.want_to_sample(),
        }
    }

    fn uses_counter(&self) -> bool {
        matches!(self.policy, Policy::Counter { .. })
    }

    /// Counter-policy decision; only valid when the policy is a counter.
    #[inline(always)]
    fn counter_tick(&self) -> bool {
        let skip = SKIP.get().wrapping_sub(1);
        SKIP.set(skip);
        skip == 0 && self.counter_slow()
    }

    #[cold]
    #[inline(never)]
    fn counter_slow(&self) -> bool {
        let Policy::Counter { rate, seed, threads } = &self.policy else {
            return false;
        };
        if SKIP_OWNER.get() != self.id {
            // First allocation this thread makes through this allocator:
            // draw the initial counter, then count this call against it.
            let stream = threads.fetch_add(1, Ordering::Relaxed);
            let mut rng = XorShift64Star::from_state(rng::derive_seed(*seed, stream));
            let first = sampler::draw_skip(&mut rng, *rate);
            SKIP_OWNER.set(self.id);
            if first > 1 {
                SKIP.set(first - 1);
                SKIP_RNG.set(rng.state());
                return false;
            }
            SKIP.set(sampler::draw_skip(&mut rng, *rate));
            SKIP_RNG.set(rng.state());
            return true;
        }
        let mut rng = XorShift64Star::from_state(SKIP_RNG.get());
        SKIP.set(sampler::draw_skip(&mut rng, *rate));
        SKIP_RNG.set(rng.state());
        true
    }

    /// Tries to place a sampled allocation in the pool. `None` means the
    /// caller should use its fallback allocator.
    #[cold]
    #[inline(never)]
    pub fn alloc_sampled(&self, size: usize, alignment: usize) -> Option<NonNull<u8>> {
        let n = self.counters.sampled.fetch_add(1, Ordering::Relaxed);
        // Runtime startup code and other libraries may take over SIGSEGV
        // after we installed; take it back before handing out guarded
        // memory. Checked on every early sample, then periodically.
        if n < HANDLER_CHECK_EARLY || n % HANDLER_CHECK_PERIOD == 0 {
            handler::ensure_installed();
        }
        let page = self.pool.page_size();
        let alignment = alignment.max(1);
        if size == 0 || size > page || !alignment.is_power_of_two() || alignment > page {
            bump(&self.counters.unsupported);
            return None;
        }
        if self.disabled.load(Ordering::Acquire) {
            return None;
        }
        let trace = trace::capture_from_frame(trace::frame_pointer(), self.max_frames);
        let thread = platform::thread_id();
        let source = self.coverage.as_ref().map(|_| coverage::source_of(&trace));

        let mut pool = self.pool.lock();
        let mut cov = self
            .coverage
            .as_ref()
            .map(|c| c.lock().unwrap_or_else(|e| e.into_inner()));
        if let (Some(cov), Some(source)) = (cov.as_ref(), source) {
            if !cov.filter.admit(pool.utilization(), source) {
                bump(&self.counters.coverage_rejections);
                return None;
            }
        }
        match pool.acquire(size, alignment) {
            Acquired::Slot { index, address } => {
                let handle = self.store.store_alloc(index as u32, size, thread, &trace);
                pool.set_metadata(index, handle);
                if let (Some(cov), Some(source)) = (cov.as_mut(), source) {
                    cov.filter.insert(source);
                    cov.sources[index] = Some(source);
                }
                bump(&self.counters.guarded);
                Some(address)
            }
            Acquired::Unavailable(_) => {
                bump(&self.counters.pool_unavailable);
                None
            }
        }
    }

    /// Size of the live allocation starting exactly at `addr`.
    pub fn allocation_size(&self, addr: usize) -> Option<usize> {
        let slot = self.pool.slot_of(addr)?;
        let record = self.pool.slot_record(slot)?;
        (record.state == SlotState::Allocated && self.pool.slot_start(slot) + record.user_offset == addr)
            .then_some(record.user_size)
    }

    /// Frees a pointer inside the pool, reporting double and invalid frees.
    #[cold]
    #[inline(never)]
    pub fn free_guarded(&self, addr: usize) {
        let trace = trace::capture_from_frame(trace::frame_pointer(), self.max_frames);
        let thread = platform::thread_id();
        let error = {
            let mut pool = self.pool.lock();
            match self.free_error(addr) {
                None => {
                    let slot = self.pool.slot_of(addr).expect("validated slot");
                    if let Some(handle) = self.pool.slot_record(slot).and_then(|r| r.metadata) {
                        self.store.store_dealloc(handle, thread, &trace);
                    }
                    if let Some(cov) = &self.coverage {
                        let mut cov = cov.lock().unwrap_or_else(|e| e.into_inner());
                        let CoverageState { filter, sources } = &mut *cov;
                        if let Some(source) = sources[slot].take() {
                            filter.remove(source);
                            if filter.needs_rebuild() {
                                filter.rebuild(sources.iter().flatten().copied());
                            }
                        }
                    }
                    pool.release(slot);
                    bump(&self.counters.guarded_frees);
                    return;
                }
                Some(error) => error,
            }
        };
        let (kind, slot) = error;
        if self.recoverable && self.disabled.swap(true, Ordering::AcqRel) {
            bump(&self.counters.silent_recoveries);
            return;
        }
        let report = self.describe(kind, addr, AccessKind::Unknown, thread, trace, slot);
        bump(&self.counters.reports);
        self.output.emit(&report);
        if !self.recoverable {
            std::process::abort();
        }
    }

    fn free_error(&self, addr: usize) -> Option<(ErrorKind, Option<usize>)> {
        match self.pool.classify_address(addr) {
            AddressClass::AllocatedSlot(s) => {
                (self.pool.user_address(s) != addr).then_some((ErrorKind::InvalidFree, Some(s)))
            }
            AddressClass::QuarantinedSlot(s) => Some((ErrorKind::DoubleFree, Some(s))),
            AddressClass::LeftGuardOf(s) | AddressClass::RightGuardOf(s) => {
                Some((ErrorKind::InvalidFree, Some(s)))
            }
            AddressClass::FreeSlot(_) | AddressClass::UnattributedGuard(_) | AddressClass::NotOurs => {
                Some((ErrorKind::InvalidFree, None))
            }
        }
    }

    /// Assembles a report from slot geometry and metadata. Lock-free.
    fn describe(
        &self,
        kind: ErrorKind,
        addr: usize,
        access_kind: AccessKind,
        thread: u64,
        fault_trace: StackTrace,
        slot: Option<usize>,
    ) -> ErrorReport {
        let mut report = ErrorReport {
            kind,
            access_address: addr,
            access_kind,
            faulting_thread: thread,
            fault_trace,
            allocation_address: 0,
            allocation_size: 0,
            allocation: None,
            deallocation: None,
            metadata_lost: false,
        };
        let Some(record) = slot.and_then(|s| self.pool.slot_record(s)) else {
            return report;
        };
        let slot = slot.unwrap_or_default();
        report.allocation_address = self.pool.slot_start(slot) + record.user_offset;
        report.allocation_size = record.user_size;
        match record.metadata.and_then(|h| self.store.snapshot(h)) {
            Some(meta) => {
                report.allocation = Some(TraceRecord {
                    thread: meta.alloc_thread,
                    frames: meta.alloc_frames(),
                });
                report.deallocation = meta.dealloc.as_ref().map(|(t, _)| TraceRecord {
                    thread: *t,
                    frames: meta.dealloc_frames().unwrap_or_default(),
                });
            }
            None => report.metadata_lost = true,
        }
        report
    }

    /// Classifies, reports and resolves a fault inside the pool. Runs in
    /// the signal handler.
    pub(crate) fn handle_fault(&self, addr: usize, ctx: &FaultContext) -> FaultOutcome {
        if self.recoverable && self.disabled.load(Ordering::Acquire) {
            return self.recover_silently(addr);
        }
        let (kind, slot) = match self.pool.classify_address(addr) {
            AddressClass::QuarantinedSlot(s) => (ErrorKind::UseAfterFree, Some(s)),
            AddressClass::LeftGuardOf(s) => match self.pool.slot_state(s) {
                SlotState::Quarantined => (ErrorKind::UseAfterFree, Some(s)),
                _ => (ErrorKind::BufferUnderflow, Some(s)),
            },
            AddressClass::RightGuardOf(s) => match self.pool.slot_state(s) {
                SlotState::Quarantined => (ErrorKind::UseAfterFree, Some(s)),
                _ => (ErrorKind::BufferOverflow, Some(s)),
            },
            // The slot was handed out after the fault was raised; its page
            // is accessible now, so the access can simply be retried.
            AddressClass::AllocatedSlot(_) => return FaultOutcome::Resume,
            AddressClass::FreeSlot(_) | AddressClass::UnattributedGuard(_) => {
                (ErrorKind::IndeterminateGuardHit, None)
            }
            AddressClass::NotOurs => return FaultOutcome::Terminate,
        };
        if self.recoverable && self.disabled.swap(true, Ordering::AcqRel) {
            return self.recover_silently(addr);
        }
        let thread = platform::thread_id_in_handler();
        let access = handler::determine_access_kind(ctx);
        let trace = trace::capture_from_context(ctx.pc, ctx.fp, ctx.sp, self.max_frames);
        let report = self.describe(kind, addr, access, thread, trace, slot);
        bump(&self.counters.reports);
        self.output.emit(&report);
        if self.recoverable && self.pool.unprotect_page_zeroed(addr) {
            FaultOutcome::Resume
        } else {
            FaultOutcome::Terminate
        }
    }

    fn recover_silently(&self, addr: usize) -> FaultOutcome {
        bump(&self.counters.silent_recoveries);
        if self.pool.unprotect_page_zeroed(addr) {
            FaultOutcome::Resume
        } else {
            FaultOutcome::Terminate
        }
    }

    pub fn stats(&self) -> GuardianStats {
        let pool = self.pool.stats();
        let live = self.pool.lock().live_count();
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        GuardianStats {
            sampled: load(&c.sampled),
            guarded: load(&c.guarded),
            unsupported: load(&c.unsupported),
            coverage_rejections: load(&c.coverage_rejections),
            pool_unavailable: load(&c.pool_unavailable),
            guarded_frees: load(&c.guarded_frees),
            reports: load(&c.reports),
            silent_recoveries: load(&c.silent_recoveries),
            disabled: self.is_disabled(),
            live,
            pool,
        }
    }

    /// Worst-case resident bytes: every permitted slot page in use plus
    /// metadata and per-slot bookkeeping.
    pub fn memory_footprint(&self) -> usize {
        let config = self.pool.config();
        let page = self.pool.page_size();
        let slots = config.slot_count;
        let bookkeeping = slots * (std::mem::size_of::<u64>() * 4 + std::mem::size_of::<Option<u64>>())
            + self.coverage.as_ref().map_or(0, |_| {
                coverage::DEFAULT_COUNTERS / 2 + slots * std::mem::size_of::<Option<CoverageSource>>()
            });
        config.max_simultaneous_allocations * page
            + self.store.footprint_bytes()
            + bookkeeping
            + std::mem::size_of::<Self>()
    }

    /// Text of every captured report, when the sink is a capture buffer.
    pub fn report_text(&self) -> String {
        self.output.capture().map(|c| c.text()).unwrap_or_default()
    }

    pub fn reports(&self) -> Vec<ErrorReport> {
        let text = self.report_text();
        report::split_reports(&text)
            .into_iter()
            .filter_map(|r| report::parse_report(r).ok())
            .collect()
    }

    /// Reports that did not fit in the capture buffer.
    pub fn dropped_reports(&self) -> usize {
        self.output.capture().map_or(0, |c| c.dropped())
    }

    pub fn clear_reports(&self) {
        if let Some(c) = self.output.capture() {
            c.clear();
        }
    }
}

impl Drop for Guardian {
    fn drop(&mut self) {
        if self.registry_index != usize::MAX {
            handler::unregister(self.registry_index);
        }
    }
}

/// A libc-style allocator that guarded requests fall back to.
///
/// # Safety
/// Implementations must behave like `malloc`: returned blocks are valid for
/// `size` bytes, aligned as requested, and stay valid until freed.
pub unsafe trait HostAllocator: Send + Sync {
    fn malloc(&self, size: usize, alignment: usize) -> *mut u8;
    fn calloc(&self, size: usize, alignment: usize) -> *mut u8;
    /// # Safety
    /// `ptr` must come from this allocator and be live.
    unsafe fn realloc(&self, ptr: *mut u8, size: usize) -> *mut u8;
    /// Like C `free`, a null `ptr` is a no-op.
    ///
    /// # Safety
    /// `ptr` must be null or come from this allocator and be live.
    unsafe fn free(&self, ptr: *mut u8);
    /// # Safety
    /// `ptr` must come from this allocator and be live.
    unsafe fn usable_size(&self, ptr: *mut u8) -> usize;
}

/// The C library's allocator.
#[derive(Debug, Clone, Copy, Default)]
pub struct LibcMalloc;

unsafe impl HostAllocator for LibcMalloc {
    #[inline]
    fn malloc(&self, size: usize, alignment: usize) -> *mut u8 {
        // SAFETY: plain libc allocation calls.
        unsafe {
            if alignment <= HOST_MIN_ALIGNMENT {
                libc::malloc(size).cast()
            } else {
                let mut out = ptr::null_mut();
                let align = alignment.max(std::mem::size_of::<usize>());
                if libc::posix_memalign(&mut out, align, size) != 0 {
                    return ptr::null_mut();
                }
                out.cast()
            }
        }
    }

    #[inline]
    fn calloc(&self, size: usize, alignment: usize) -> *mut u8 {
        if alignment <= HOST_MIN_ALIGNMENT {
            // SAFETY: plain libc call.
            return unsafe { libc::calloc(1, size).cast() };
        }
        let p = self.malloc(size, alignment);
        if !p.is_null() {
            // SAFETY: p is valid for size bytes.
            unsafe { ptr::write_bytes(p, 0, size) };
        }
        p
    }

    #[inline]
    unsafe fn realloc(&self, ptr: *mut u8, size: usize) -> *mut u8 {
        libc::realloc(ptr.cast(), size).cast()
    }

    #[inline]
    unsafe fn free(&self, ptr: *mut u8) {
        libc::free(ptr.cast())
    }

    #[inline]
    unsafe fn usable_size(&self, ptr: *mut u8) -> usize {
        #[cfg(target_os = "linux")]
        {
            libc::malloc_usable_size(ptr.cast())
        }
        #[cfg(not(target_os = "linux"))]
        {
            libc::malloc_size(ptr.cast())
        }
    }
}

/// Explicit-handle allocator: guarded sampling in front of a host
/// allocator.
///
/// Guarded allocations live in memory owned by this handle; they must not
/// be used after it is dropped.
pub struct GuardianAllocator<H: HostAllocator = LibcMalloc> {
    guardian: Option<Box<Guardian>>,
    // Copies of the pool range and sampling mode so the fast paths need no
    // load through the guardian; the range is empty when disabled.
    counter: bool,
    pool_base: usize,
    pool_len: usize,
    host: H,
    init_error: Option<String>,
}

impl GuardianAllocator<LibcMalloc> {
    pub fn new(config: GuardianConfig) -> Result<Self, GuardianError> {
        Self::with_host(config, LibcMalloc)
    }
}

impl<H: HostAllocator> GuardianAllocator<H> {
    /// Creates the allocator. When process sampling declines, or the pool
    /// cannot be reserved, the result forwards everything to `host`.
    pub fn with_host(config: GuardianConfig, host: H) -> Result<Self, GuardianError> {
        config.validate()?;
        if !config.enabled_for_process() {
            return Ok(Self::disabled(host));
        }
        match Guardian::new(&config) {
            Ok(g) => Ok(Self {
                counter: g.uses_counter(),
                pool_base: g.pool().base(),
                pool_len: g.pool().region_len(),
                guardian: Some(g),
                host,
                init_error: None,
            }),
            Err(GuardianError::Pool(PoolError::Unavailable(e))) => Ok(Self {
                guardian: None,
                counter: false,
                pool_base: 0,
                pool_len: 0,
                host,
                init_error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    }

    /// A pass-through allocator with no pool.
    pub fn disabled(host: H) -> Self {
        Self {
            guardian: None,
            counter: false,
            pool_base: 0,
            pool_len: 0,
            host,
            init_error: None,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.guardian.is_some()
    }

    /// Why the pool could not be reserved, if that disabled the allocator.
    pub fn init_error(&self) -> Option<&str> {
        self.init_error.as_deref()
    }

    pub fn guardian(&self) -> Option<&Guardian> {
        self.guardian.as_deref()
    }

    pub fn host(&self) -> &H {
        &self.host
    }

    #[inline(always)]
    pub fn malloc(&self, size: usize, alignment: usize) -> *mut u8 {
        if let Some(g) = &self.guardian {
            let sample = if self.counter { g.counter_tick() } else { g.want_to_sample() };
            if sample {
                if let Some(p) = g.alloc_sampled(size, alignment) {
                    return p.as_ptr();
                }
            }
        }
        self.host.malloc(size, alignment)
    }

    /// Zeroed allocation of `count * size` bytes; null on overflow.
    #[inline(always)]
    pub fn calloc(&self, count: usize, size: usize) -> *mut u8 {
        let Some(total) = count.checked_mul(size) else {
            return ptr::null_mut();
        };
        if let Some(g) = &self.guardian {
            let sample = if self.counter { g.counter_tick() } else { g.want_to_sample() };
            if sample {
                // Slot pages are fresh or zeroed on reuse.
                if let Some(p) = g.alloc_sampled(total, 1) {
                    return p.as_ptr();
                }
            }
        }
        self.host.calloc(total, 1)
    }

    /// Frees a pointer from [`malloc`](Self::malloc) and friends.
    ///
    /// # Safety
    /// A non-guarded `ptr` must be a live host allocation or null. Guarded
    /// pointers are validated; misuse is reported.
    #[inline(always)]
    pub unsafe fn free(&self, ptr: *mut u8) {
        if self.is_guarded(ptr) {
            if let Some(g) = &self.guardian {
                g.free_guarded(ptr as usize);
                return;
            }
        }
        self.host.free(ptr)
    }

    /// # Safety
    /// As for [`free`](Self::free).
    pub unsafe fn realloc(&self, ptr: *mut u8, size: usize) -> *mut u8 {
        if ptr.is_null() {
            return self.malloc(size, 1);
        }
        if let Some(g) = &self.guardian {
            if g.owns(ptr as usize) {
                let Some(old) = g.allocation_size(ptr as usize) else {
                    // Reports the double or invalid free.
                    g.free_guarded(ptr as usize);
                    return ptr::null_mut();
                };
                if size == 0 {
                    g.free_guarded(ptr as usize);
                    return ptr::null_mut();
                }
                let new = self.malloc(size, 1);
                if !new.is_null() {
                    ptr::copy_nonoverlapping(ptr, new, old.min(size));
                    g.free_guarded(ptr as usize);
                }
                return new;
            }
        }
        self.host.realloc(ptr, size)
    }

    /// Requested size for guarded pointers; the host's answer otherwise.
    ///
    /// # Safety
    /// As for [`free`](Self::free).
    pub unsafe fn usable_size(&self, ptr: *mut u8) -> usize {
        if ptr.is_null() {
            return 0;
        }
        if let Some(g) = &self.guardian {
            if g.owns(ptr as usize) {
                return g.allocation_size(ptr as usize).unwrap_or(0);
            }
        }
        self.host.usable_size(ptr)
    }

    /// Range check only; never dereferences `ptr`.
    #[inline(always)]
    pub fn is_guarded(&self, ptr: *const u8) -> bool {
        (ptr as usize).wrapping_sub(self.pool_base) < self.pool_len
    }

    pub fn stats(&self) -> GuardianStats {
        self.guardian.as_ref().map(|g| g.stats()).unwrap_or_default()
    }

    pub fn reports(&self) -> Vec<ErrorReport> {
        self.guardian.as_ref().map(|g| g.reports()).unwrap_or_default()
    }

    pub fn report_text(&self) -> String {
        self.guardian.as_ref().map(|g| g.report_text()).unwrap_or_default()
    }

    pub fn memory_footprint(&self) -> usize {
        self.guardian.as_ref().map_or(0, |g| g.memory_footprint())
    }
}
