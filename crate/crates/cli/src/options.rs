use std::fmt;
use std::time::Duration;

use clap::{Args, ValueEnum};
use gwpasan::{
    AlignmentPolicy, CounterSamplerConfig, GuardianConfig, PoolConfig, ReportSink, ReporterConfig,
    SamplingPolicy,
};
use thiserror::Error;

/// Exit status for a completed run, including a bug detected as expected.
pub const EXIT_OK: i32 = 0;
/// Exit status for a failed run that is not one of the cases below.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status when an injected bug went undetected.
pub const EXIT_UNDETECTED: i32 = 2;
/// Exit status for invalid flags or an unusable configuration.
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Counter,
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Human,
    Records,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<gwpasan::GuardianError> for HarnessError {
    fn from(e: gwpasan::GuardianError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

/// Settings shared by every subcommand. Unset values fall back to the
/// subcommand's own defaults.
#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct HarnessConfig {
    #[arg(long, global = true, value_enum, default_value_t = Policy::Counter)]
    pub policy: Policy,
    /// Mean allocations per sampled allocation (counter policy).
    #[arg(long, global = true)]
    pub sample_rate: Option<u32>,
    /// Sampling period in milliseconds (timer policy).
    #[arg(long, global = true, default_value_t = 100)]
    pub sample_interval_ms: u64,
    #[arg(long, global = true, default_value_t = 16)]
    pub slots: usize,
    /// Simultaneous guarded allocations; defaults to the slot count.
    #[arg(long, global = true)]
    pub max_live: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub quarantine_min: usize,
    /// Report the first error, then keep running.
    #[arg(long, global = true)]
    pub recoverable: bool,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub iterations: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    pub format: Format,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Counter,
            sample_rate: None,
            sample_interval_ms: 100,
            slots: 16,
            max_live: None,
            quarantine_min: 0,
            recoverable: false,
            seed: 1,
            iterations: None,
            format: Format::Human,
        }
    }
}

impl HarnessConfig {
    /// Flags that parse back to `self`.
    pub fn to_args(&self) -> Vec<String> {
        let mut out = vec![
            "--policy".to_string(),
            value_name(self.policy),
            "--sample-interval-ms".into(),
            self.sample_interval_ms.to_string(),
            "--slots".into(),
            self.slots.to_string(),
            "--quarantine-min".into(),
            self.quarantine_min.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--format".into(),
            value_name(self.format),
        ];
        if let Some(r) = self.sample_rate {
            out.extend(["--sample-rate".into(), r.to_string()]);
        }
        if let Some(m) = self.max_live {
            out.extend(["--max-live".into(), m.to_string()]);
        }
        if let Some(i) = self.iterations {
            out.extend(["--iterations".into(), i.to_string()]);
        }
        if self.recoverable {
            out.push("--recoverable".into());
        }
        out
    }

    pub fn iterations_or(&self, default: u64) -> u64 {
        self.iterations.unwrap_or(default)
    }

    /// Library configuration for this harness run. Reports go to a capture
    /// buffer in recoverable mode and to stderr otherwise.
    pub fn guardian_config(
        &self,
        default_sample_rate: u32,
        alignment: AlignmentPolicy,
    ) -> Result<GuardianConfig, HarnessError> {
        let policy = match self.policy {
            Policy::Counter => SamplingPolicy::Counter(CounterSamplerConfig {
                sample_rate: self.sample_rate.unwrap_or(default_sample_rate),
                rng_seed: Some(self.seed),
            }),
            Policy::Timer => SamplingPolicy::Timer {
                interval: Duration::from_millis(self.sample_interval_ms),
            },
        };
        let sink = if self.recoverable {
            ReportSink::Capture {
                capacity: gwpasan::handler::DEFAULT_CAPTURE_CAPACITY,
            }
        } else {
            ReportSink::Stderr
        };
        let config = GuardianConfig {
            pool: PoolConfig {
                slot_count: self.slots,
                max_simultaneous_allocations: self.max_live.unwrap_or(self.slots),
                quarantine_min_slots: self.quarantine_min,
                alignment,
                // Byte-granular placement so right-aligned allocations end
                // exactly at the guard page.
                min_alignment: 1,
                seed: self.seed,
                ..PoolConfig::default()
            },
            policy,
            process_entropy: Some(self.seed),
            reporter: ReporterConfig {
                recoverable: self.recoverable,
                sink,
                module_offsets: true,
            },
            ..GuardianConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

/// One line of `--format records` output: a record type followed by
/// `key=value` fields in insertion order.
#[derive(Debug, Clone)]
pub struct Record {
    line: String,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Self { line: kind.to_string() }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        use fmt::Write;
        let _ = write!(self.line, " {key}={value}");
        self
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line)
    }
}

/// Looks up `key` in a record line.
pub fn record_field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace()
        .skip(1)
        .find_map(|kv| kv.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
}
