//! Fast-path overhead microbenchmark.
//!
//! Three variants run the same loop of 16-byte malloc/free pairs: the host
//! allocator called directly, the tool enabled, and the tool present but
//! switched off by process sampling. Within a trial each variant runs the
//! full iteration count, split into chunks that alternate between the
//! variants in a rotating order, so that frequency changes and noisy
//! neighbours hit all three alike. Reported times are each variant's
//! fastest trial. Overheads are the median over all chunks of the ratio
//! between a variant's chunk and the baseline chunk of the same round,
//! which cancels slow drift and ignores chunks hit by interference.

use std::hint::black_box;
use std::time::{Duration, Instant};

use gwpasan::{
    AlignmentPolicy, GuardianAllocator, HostAllocator, LibcMalloc, ProcessSamplingConfig, ReportSink,
};

use crate::options::{Format, HarnessConfig, HarnessError, Record};

pub const DEFAULT_SAMPLE_RATE: u32 = 5000;
pub const DEFAULT_ITERATIONS: u64 = 10_000_000;
pub const DEFAULT_TRIALS: usize = 5;
const CHUNKS: u64 = 20;
const ALLOCATION_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub iterations: u64,
    pub trials: usize,
    pub sample_rate: u32,
    pub slots: usize,
    pub baseline: Duration,
    pub enabled: Duration,
    pub disabled: Duration,
    /// Guarded allocations made during all enabled trials.
    pub guarded: u64,
    /// Median paired chunk ratio minus one, per tool variant.
    pub enabled_ratio: f64,
    pub disabled_ratio: f64,
}

impl BenchResult {
    pub fn ns_per_op(&self, d: Duration) -> f64 {
        d.as_nanos() as f64 / self.iterations as f64
    }

    /// Relative slowdown with the tool enabled (0.05 = 5%).
    pub fn enabled_overhead(&self) -> f64 {
        self.enabled_ratio
    }

    /// Relative slowdown with the tool disabled by process sampling.
    pub fn disabled_overhead(&self) -> f64 {
        self.disabled_ratio
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Human => {
                let mut out = format!(
                    "malloc/free of {ALLOCATION_SIZE}B, {} iterations, best of {} trials, sample rate {}, {} slots\n",
                    self.iterations, self.trials, self.sample_rate, self.slots
                );
                out.push_str(&format!(
                    "  baseline   {:>8.2} ns/op\n",
                    self.ns_per_op(self.baseline)
                ));
                out.push_str(&format!(
                    "  enabled    {:>8.2} ns/op  {:+.2}%  ({} guarded)\n",
                    self.ns_per_op(self.enabled),
                    100.0 * self.enabled_overhead(),
                    self.guarded
                ));
                out.push_str(&format!(
                    "  disabled   {:>8.2} ns/op  {:+.2}%\n",
                    self.ns_per_op(self.disabled),
                    100.0 * self.disabled_overhead()
                ));
                out
            }
            Format::Records => {
                let rec = Record::new("bench")
                    .field("iterations", self.iterations)
                    .field("trials", self.trials)
                    .field("sample_rate", self.sample_rate)
                    .field("slots", self.slots)
                    .field("baseline_ns", format!("{:.3}", self.ns_per_op(self.baseline)))
                    .field("enabled_ns", format!("{:.3}", self.ns_per_op(self.enabled)))
                    .field("disabled_ns", format!("{:.3}", self.ns_per_op(self.disabled)))
                    .field("enabled_overhead", format!("{:.4}", self.enabled_overhead()))
                    .field("disabled_overhead", format!("{:.4}", self.disabled_overhead()))
                    .field("guarded", self.guarded);
                format!("{rec}\n")
            }
        }
    }
}

#[inline(never)]
fn host_loop(h: &LibcMalloc, iterations: u64) {
    for i in 0..iterations {
        let p = h.malloc(ALLOCATION_SIZE, 1);
        // SAFETY: p is a live 16-byte block freed once.
        unsafe {
            p.write_volatile(i as u8);
            h.free(black_box(p));
        }
    }
}

#[inline(never)]
fn tool_loop(a: &GuardianAllocator, iterations: u64) {
    for i in 0..iterations {
        let p = a.malloc(ALLOCATION_SIZE, 1);
        // SAFETY: p is a live 16-byte block freed once.
        unsafe {
            p.write_volatile(i as u8);
            a.free(black_box(p));
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (Duration, T) {
    let start = Instant::now();
    let v = f();
    (start.elapsed(), v)
}

pub fn run(config: &HarnessConfig, trials: usize) -> Result<BenchResult, HarnessError> {
    let iterations = config.iterations_or(DEFAULT_ITERATIONS);
    let trials = trials.max(1);
    let mut gc = config.guardian_config(DEFAULT_SAMPLE_RATE, AlignmentPolicy::Random)?;
    gc.reporter.sink = ReportSink::Capture { capacity: 1 << 12 };
    let sample_rate = match &gc.policy {
        gwpasan::SamplingPolicy::Counter(c) => c.sample_rate,
        _ => 0,
    };
    let enabled = GuardianAllocator::new(gc.clone())?;
    if !enabled.is_enabled() {
        return Err(HarnessError::Failed(
            enabled.init_error().unwrap_or("tool disabled").to_string(),
        ));
    }
    gc.process_sampling = ProcessSamplingConfig::NEVER;
    let disabled = GuardianAllocator::new(gc)?;
    assert!(!disabled.is_enabled());
    let host = LibcMalloc;

    // Warm the host allocator's caches and the page tables.
    host_loop(&host, iterations.min(100_000));
    tool_loop(&enabled, iterations.min(100_000));

    let mut best = [Duration::MAX; 3];
    let mut ratios = [Vec::new(), Vec::new()];
    let guarded_before = enabled.stats().guarded;
    let chunk = iterations.div_ceil(CHUNKS);
    let mut chunks = 0usize;
    for _ in 0..trials {
        let mut total = [Duration::ZERO; 3];
        let mut left = iterations;
        while left > 0 {
            let n = chunk.min(left);
            left -= n;
            // Rotate the running order so no variant always goes first.
            let mut t = [Duration::ZERO; 3];
            for k in 0..3 {
                let v = (k + chunks) % 3;
                t[v] = match v {
                    0 => timed(|| host_loop(&host, n)).0,
                    1 => timed(|| tool_loop(&enabled, n)).0,
                    _ => timed(|| tool_loop(&disabled, n)).0,
                };
            }
            chunks += 1;
            for v in 0..3 {
                total[v] += t[v];
            }
            for v in 0..2 {
                ratios[v].push(t[v + 1].as_secs_f64() / t[0].as_secs_f64());
            }
        }
        for (b, t) in best.iter_mut().zip(total) {
            *b = (*b).min(t);
        }
    }
    let [enabled_ratio, disabled_ratio] = ratios.map(|r| median(r) - 1.0);
    Ok(BenchResult {
        iterations,
        trials,
        sample_rate,
        slots: config.slots,
        baseline: best[0],
        enabled: best[1],
        disabled: best[2],
        guarded: enabled.stats().guarded - guarded_before,
        enabled_ratio,
        disabled_ratio,
    })
}
