//! Configuration from environment variables, for the process-global
//! allocator and the command-line harness.
//!
//! | Variable | Meaning |
//! |---|---|
//! | `GWPASAN_ENABLED` | `0` turns the tool off |
//! | `GWPASAN_POLICY` | `counter` or `timer` |
//! | `GWPASAN_SAMPLE_RATE` | mean allocations per sample (counter) |
//! | `GWPASAN_SAMPLE_INTERVAL_MS` | milliseconds between samples (timer) |
//! | `GWPASAN_PROCESS_PROBABILITY` | `1/128` or `0.25`: chance the tool is on |
//! | `GWPASAN_SEED` | seed for every random choice |
//! | `GWPASAN_SLOTS` | pool slots |
//! | `GWPASAN_MAX_LIVE` | simultaneous guarded allocations |
//! | `GWPASAN_QUARANTINE_MIN` | acquisitions before a freed slot is reused |
//! | `GWPASAN_RECOVERABLE` | `1` to report once and continue |

use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::sampler::{CounterSamplerConfig, ProcessSamplingConfig};
use crate::shim::{GuardianConfig, SamplingPolicy};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{name}: {message}")]
pub struct ConfigError {
    pub name: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Counter,
    Timer,
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "counter" => Ok(PolicyKind::Counter),
            "timer" => Ok(PolicyKind::Timer),
            other => Err(format!("unknown policy {other:?}; expected counter or timer")),
        }
    }
}

/// Parses `a/b` or a decimal in `[0, 1]`.
pub fn parse_probability(s: &str) -> Result<ProcessSamplingConfig, String> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
        let d: u64 = d.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
        if d == 0 || n > d {
            return Err(format!("{s:?} is not a probability"));
        }
        return Ok(ProcessSamplingConfig {
            numerator: n,
            denominator: d,
        });
    }
    let p: f64 = s.parse().map_err(|_| format!("bad probability {s:?}"))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("{s:?} is not a probability"));
    }
    const SCALE: u64 = 1 << 32;
    Ok(ProcessSamplingConfig {
        numerator: (p * SCALE as f64).round() as u64,
        denominator: SCALE,
    })
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got {other:?}")),
    }
}

/// Builds a configuration from `lookup(name)`, starting from defaults.
pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<GuardianConfig, ConfigError> {
    fn get<T>(
        lookup: &impl Fn(&str) -> Option<String>,
        name: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        match lookup(name) {
            None => Ok(None),
            Some(v) => parse(&v).map(Some).map_err(|message| ConfigError {
                name: name.into(),
                message,
            }),
        }
    }
    fn num<T: FromStr>(s: &str) -> Result<T, String> {
        s.trim().parse().map_err(|_| format!("expected a number, got {s:?}"))
    }

    let mut config = GuardianConfig::default();
    let seed: Option<u64> = get(&lookup, "GWPASAN_SEED", num)?;
    let policy = get(&lookup, "GWPASAN_POLICY", |s| s.trim().parse::<PolicyKind>())?
        .unwrap_or(PolicyKind::Counter);
    let rate: Option<u32> = get(&lookup, "GWPASAN_SAMPLE_RATE", num)?;
    let interval: Option<u64> = get(&lookup, "GWPASAN_SAMPLE_INTERVAL_MS", num)?;
    config.policy = match policy {
        PolicyKind::Counter => SamplingPolicy::Counter(CounterSamplerConfig {
            sample_rate: rate.unwrap_or(crate::shim::DEFAULT_SAMPLE_RATE),
            rng_seed: seed,
        }),
        PolicyKind::Timer => SamplingPolicy::Timer {
            interval: interval
                .map(Duration::from_millis)
                .unwrap_or(crate::sampler::DEFAULT_SAMPLE_INTERVAL),
        },
    };
    if let Some(seed) = seed {
        config.pool.seed = seed;
        config.process_entropy = Some(seed);
    }
    if let Some(p) = get(&lookup, "GWPASAN_PROCESS_PROBABILITY", parse_probability)? {
        config.process_sampling = p;
    }
    if get(&lookup, "GWPASAN_ENABLED", parse_bool)? == Some(false) {
        config.process_sampling = ProcessSamplingConfig::NEVER;
    }
    let slots: Option<usize> = get(&lookup, "GWPASAN_SLOTS", num)?;
    if let Some(n) = slots {
        config.pool.slot_count = n;
        config.pool.max_simultaneous_allocations = n;
    }
    if let Some(m) = get(&lookup, "GWPASAN_MAX_LIVE", num)? {
        config.pool.max_simultaneous_allocations = m;
    }
    if let Some(q) = get(&lookup, "GWPASAN_QUARANTINE_MIN", num)? {
        config.pool.quarantine_min_slots = q;
    }
    if let Some(r) = get(&lookup, "GWPASAN_RECOVERABLE", parse_bool)? {
        config.reporter.recoverable = r;
    }
    config.validate().map_err(|e| ConfigError {
        name: "GWPASAN_*".into(),
        message: e.to_string(),
    })?;
    Ok(config)
}

pub fn from_env() -> Result<GuardianConfig, ConfigError> {
    from_lookup(|name| std::env::var(name).ok())
}
