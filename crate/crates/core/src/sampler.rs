//! Sampling policies deciding which allocations are guarded.
//!
//! * Counter: a per-thread skip counter redrawn uniformly from
//!   `[1, 2 * sample_rate]` whenever it runs out, so the fast path is one
//!   thread-local decrement and a branch.
//! * Timer: a shared gate armed once per interval by a timer and consumed
//!   atomically by the first allocation that sees it.
//! * Process: a one-time decision at startup that enables the whole tool
//!   with a fixed probability.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::rng::{self, XorShift64Star};

/// Parameters of the counter policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterSamplerConfig {
    /// Mean number of allocations per sample; at least 1.
    pub sample_rate: u32,
    pub rng_seed: Option<u64>,
}

impl CounterSamplerConfig {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            sample_rate: sample_rate.max(1),
            rng_seed: None,
        }
    }
}

/// Draws a skip value uniformly from `[1, 2 * sample_rate]`.
#[inline]
pub fn draw_skip(rng: &mut XorShift64Star, sample_rate: u32) -> u32 {
    1 + rng.below(2 * u64::from(sample_rate.max(1))) as u32
}

/// Counter policy state for one thread.
#[derive(Debug, Clone)]
pub struct ThreadSamplerState {
    skip: u32,
    sample_rate: u32,
    rng: XorShift64Star,
}

impl ThreadSamplerState {
    /// Starts a thread's counter with its first random draw.
    pub fn new(config: CounterSamplerConfig, stream: u64) -> Self {
        let seed = config.rng_seed.unwrap_or_else(entropy);
        let mut rng = XorShift64Star::from_state(rng::derive_seed(seed, stream));
        let sample_rate = config.sample_rate.max(1);
        let skip = draw_skip(&mut rng, sample_rate);
        Self {
            skip,
            sample_rate,
            rng,
        }
    }

    pub fn skip(&self) -> u32 {
        self.skip
    }

    /// Overrides the counter; used to replay specific states.
    pub fn set_skip(&mut self, skip: u32) {
        self.skip = skip;
    }

    #[inline]
    pub fn want_to_sample(&mut self) -> bool {
        self.skip -= 1;
        if self.skip > 0 {
            return false;
        }
        self.skip = draw_skip(&mut self.rng, self.sample_rate);
        true
    }
}

/// Monotonic time source; mockable so timer tests never sleep.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Manually advanced clock.
#[derive(Debug, Default)]
pub struct MockClock {
    nanos: AtomicU64,
}

impl MockClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn set(&self, to: Duration) {
        self.nanos.store(to.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for MockClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}

/// Shared flag consumed by the first allocation after each arming.
#[derive(Debug, Default)]
pub struct TimerGate {
    armed: AtomicBool,
}

impl TimerGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arm(&self) {
        self.armed.store(true, Ordering::Release);
    }

    pub fn is_armed(&self) -> bool {
        self.armed.load(Ordering::Relaxed)
    }

    /// True for exactly one caller per arming.
    #[inline]
    pub fn want_to_sample(&self) -> bool {
        self.armed.load(Ordering::Relaxed) && self.armed.swap(false, Ordering::AcqRel)
    }
}

pub const DEFAULT_SAMPLE_INTERVAL: Duration = Duration::from_millis(100);

/// Arms a gate every `interval` of clock time. Deadlines that pass while
/// nobody polls collapse into a single arming.
pub struct TimerSchedule {
    interval: Duration,
    next_deadline: AtomicU64,
    clock: Arc<dyn Clock>,
}

impl TimerSchedule {
    pub fn new(interval: Duration, clock: Arc<dyn Clock>) -> Self {
        assert!(!interval.is_zero(), "sample interval must be positive");
        let first = clock.now() + interval;
        Self {
            interval,
            next_deadline: AtomicU64::new(first.as_nanos() as u64),
            clock,
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Arms `gate` if the current deadline has passed; returns whether it did.
    pub fn poll(&self, gate: &TimerGate) -> bool {
        let now = self.clock.now().as_nanos() as u64;
        let deadline = self.next_deadline.load(Ordering::Acquire);
        if now < deadline {
            return false;
        }
        let step = self.interval.as_nanos() as u64;
        let missed = (now - deadline) / step;
        let next = deadline + (missed + 1) * step;
        if self
            .next_deadline
            .compare_exchange(deadline, next, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
        {
            gate.arm();
            true
        } else {
            false
        }
    }

    pub fn until_next(&self) -> Duration {
        let now = self.clock.now().as_nanos() as u64;
        let deadline = self.next_deadline.load(Ordering::Acquire);
        Duration::from_nanos(deadline.saturating_sub(now))
    }
}

/// Background thread driving a [`TimerSchedule`] against wall time.
pub struct TimerThread {
    stop: Arc<(Mutex<bool>, Condvar)>,
    handle: Option<JoinHandle<()>>,
}

impl TimerThread {
    pub fn spawn(gate: Arc<TimerGate>, interval: Duration) -> std::io::Result<Self> {
        let schedule = TimerSchedule::new(interval, Arc::new(MonotonicClock::default()));
        let stop = Arc::new((Mutex::new(false), Condvar::new()));
        let stop_flag = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("gwpasan-timer".into())
            .spawn(move || {
                let (lock, cv) = &*stop_flag;
                let mut stopped = lock.lock().unwrap();
                while !*stopped {
                    let wait = schedule.until_next();
                    stopped = cv.wait_timeout(stopped, wait).unwrap().0;
                    schedule.poll(&gate);
                }
            })?;
        Ok(Self {
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for TimerThread {
    fn drop(&mut self) {
        let (lock, cv) = &*self.stop;
        *lock.lock().unwrap() = true;
        cv.notify_all();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Probability, as a fraction, that the tool is enabled in a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessSamplingConfig {
    pub numerator: u64,
    pub denominator: u64,
}

impl ProcessSamplingConfig {
    pub const ALWAYS: Self = Self {
        numerator: 1,
        denominator: 1,
    };
    pub const NEVER: Self = Self {
        numerator: 0,
        denominator: 1,
    };

    pub fn one_in(n: u64) -> Self {
        Self {
            numerator: 1,
            denominator: n.max(1),
        }
    }

    pub fn probability(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// One-time enablement draw.
pub fn process_sampling_decision(config: ProcessSamplingConfig, entropy: u64) -> bool {
    if config.numerator == 0 || config.denominator == 0 {
        return false;
    }
    if config.numerator >= config.denominator {
        return true;
    }
    let mut rng = XorShift64Star::from_state(rng::derive_seed(entropy, 0x70726f63));
    rng.below(config.denominator) < config.numerator
}

/// Fresh entropy for unseeded runs.
pub fn entropy() -> u64 {
    let t = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let marker = 0u8;
    rng::derive_seed(t ^ u64::from(std::process::id()), &marker as *const u8 as u64)
}
