//! Sampling experiments.

use std::hint::black_box;
use std::sync::Arc;
use std::time::Duration;

use gwpasan::sampler::{MockClock, TimerGate, TimerSchedule};
use gwpasan::{AlignmentPolicy, GuardianAllocator, ReportSink, SamplingPolicy};

use crate::options::{Format, HarnessConfig, HarnessError, Policy, Record};

pub const DEFAULT_SAMPLE_RATE: u32 = 1000;
pub const DEFAULT_ALLOCATIONS: u64 = 1_000_000;
/// Mock-clock span covered by a timer-policy run.
pub const DEFAULT_TIMER_SPAN: Duration = Duration::from_secs(1);
const HISTOGRAM_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub policy: Policy,
    pub allocations: u64,
    pub samples: u64,
    /// Allocations since the previous sample (or since the start), one per
    /// sample.
    pub gaps: Vec<u64>,
    /// Timer policy only: mock-clock time covered and expected sample count.
    pub span: Option<Duration>,
    pub expected_samples: Option<u64>,
}

impl SampleStats {
    pub fn rate(&self) -> f64 {
        if self.allocations == 0 {
            0.0
        } else {
            self.samples as f64 / self.allocations as f64
        }
    }

    pub fn mean_gap(&self) -> Option<f64> {
        (!self.gaps.is_empty()).then(|| self.gaps.iter().sum::<u64>() as f64 / self.gaps.len() as f64)
    }

    /// Middle element of the sorted gaps; the mean of the two middle ones
    /// for an even count.
    pub fn median_gap(&self) -> Option<f64> {
        if self.gaps.is_empty() {
            return None;
        }
        let mut g = self.gaps.clone();
        g.sort_unstable();
        let n = g.len();
        Some(if n % 2 == 1 {
            g[n / 2] as f64
        } else {
            (g[n / 2 - 1] + g[n / 2]) as f64 / 2.0
        })
    }

    /// Equal-width buckets over `[min, max]` of the gaps:
    /// `(low, high_inclusive, count)`.
    pub fn histogram(&self) -> Vec<(u64, u64, u64)> {
        let (Some(&lo), Some(&hi)) = (self.gaps.iter().min(), self.gaps.iter().max()) else {
            return Vec::new();
        };
        let width = ((hi - lo) / HISTOGRAM_BUCKETS as u64 + 1).max(1);
        let buckets = ((hi - lo) / width + 1) as usize;
        let mut counts = vec![0u64; buckets];
        for &g in &self.gaps {
            counts[((g - lo) / width) as usize] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let low = lo + i as u64 * width;
                (low, low + width - 1, c)
            })
            .collect()
    }

    pub fn render(&self, format: Format) -> String {
        let policy = match self.policy {
            Policy::Counter => "counter",
            Policy::Timer => "timer",
        };
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut out = String::new();
        match format {
            Format::Human => {
                out.push_str(&format!("policy          {policy}\n"));
                out.push_str(&format!("allocations     {}\n", self.allocations));
                out.push_str(&format!("samples         {}\n", self.samples));
                if let (Some(span), Some(expected)) = (self.span, self.expected_samples) {
                    out.push_str(&format!("clock span      {} ms\n", span.as_millis()));
                    out.push_str(&format!("expected        {expected}\n"));
                }
                out.push_str(&format!("empirical rate  {:.6}\n", self.rate()));
                out.push_str(&format!("mean gap        {}\n", fmt_opt(self.mean_gap())));
                out.push_str(&format!("median gap      {}\n", fmt_opt(self.median_gap())));
                out.push_str("gap histogram\n");
                for (lo, hi, c) in self.histogram() {
                    out.push_str(&format!("  {lo:>10} ..= {hi:<10} {c}\n"));
                }
            }
            Format::Records => {
                let mut rec = Record::new("sample-stats")
                    .field("policy", policy)
                    .field("allocations", self.allocations)
                    .field("samples", self.samples)
                    .field("rate", format!("{:.6}", self.rate()))
                    .field("mean_gap", fmt_opt(self.mean_gap()))
                    .field("median_gap", fmt_opt(self.median_gap()));
                if let (Some(span), Some(expected)) = (self.span, self.expected_samples) {
                    rec = rec.field("span_ms", span.as_millis()).field("expected", expected);
                }
                out.push_str(&format!("{rec}\n"));
                for (lo, hi, c) in self.histogram() {
                    let rec = Record::new("gap-bucket").field("low", lo).field("high", hi).field("count", c);
                    out.push_str(&format!("{rec}\n"));
                }
            }
        }
        out
    }
}

/// Runs `allocations` malloc/free pairs of 16 bytes and records which
/// ones the sampler routed to the pool. Each guarded block is freed at
/// once, so slots never run out unless the pool is configured smaller than
/// the quarantine.
pub fn run(config: &HarnessConfig) -> Result<SampleStats, HarnessError> {
    match config.policy {
        Policy::Counter => run_counter(config),
        Policy::Timer => run_timer(config, DEFAULT_TIMER_SPAN),
    }
}

fn quiet(mut c: gwpasan::GuardianConfig) -> gwpasan::GuardianConfig {
    c.reporter.sink = ReportSink::Capture { capacity: 1 << 12 };
    c
}

pub fn run_counter(config: &HarnessConfig) -> Result<SampleStats, HarnessError> {
    let allocations = config.iterations_or(DEFAULT_ALLOCATIONS);
    let a = GuardianAllocator::new(quiet(config.guardian_config(DEFAULT_SAMPLE_RATE, AlignmentPolicy::Left)?))?;
    let gaps = allocation_loop(&a, allocations, |_| {});
    Ok(SampleStats {
        policy: Policy::Counter,
        allocations,
        samples: gaps.len() as u64,
        gaps,
        span: None,
        expected_samples: None,
    })
}

/// Timer policy against a mock clock: the clock advances by
/// `span / allocations` before each allocation and a schedule arms the
/// sampling gate at every interval boundary.
pub fn run_timer(config: &HarnessConfig, span: Duration) -> Result<SampleStats, HarnessError> {
    let allocations = config.iterations_or(DEFAULT_ALLOCATIONS).max(1);
    if config.sample_interval_ms == 0 {
        return Err(HarnessError::Config("--sample-interval-ms must be positive".into()));
    }
    let interval = Duration::from_millis(config.sample_interval_ms);
    let gate = Arc::new(TimerGate::new());
    let clock = Arc::new(MockClock::new());
    let schedule = TimerSchedule::new(interval, clock.clone());
    let mut gc = quiet(config.guardian_config(DEFAULT_SAMPLE_RATE, AlignmentPolicy::Left)?);
    gc.policy = SamplingPolicy::Gate(Arc::clone(&gate));
    let a = GuardianAllocator::new(gc)?;

    let step = span.as_nanos() as u64 / allocations;
    let remainder = span.as_nanos() as u64 % allocations;
    let gaps = allocation_loop(&a, allocations, |i| {
        // Spread the remainder so the clock ends exactly at `span`.
        let extra = u64::from(i < remainder);
        clock.advance(Duration::from_nanos(step + extra));
        schedule.poll(&gate);
    });
    Ok(SampleStats {
        policy: Policy::Timer,
        allocations,
        samples: gaps.len() as u64,
        gaps,
        span: Some(span),
        expected_samples: Some((span.as_nanos() / interval.as_nanos()) as u64),
    })
}

fn allocation_loop(a: &GuardianAllocator, allocations: u64, mut before: impl FnMut(u64)) -> Vec<u64> {
    let mut gaps = Vec::new();
    let mut last = 0u64;
    for i in 0..allocations {
        before(i);
        let p = a.malloc(16, 1);
        if a.is_guarded(p) {
            gaps.push(i + 1 - last);
            last = i + 1;
        }
        // SAFETY: p is live and freed once.
        unsafe {
            p.write_volatile(1);
            a.free(black_box(p));
        }
    }
    gaps
}
