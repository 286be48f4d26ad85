use std::sync::Arc;
use std::time::Duration;

use gwpasan::rng::XorShift64Star;
use gwpasan::sampler::{draw_skip, process_sampling_decision, MockClock, ThreadSamplerState, TimerGate, TimerSchedule};
use gwpasan::{
    AlignmentPolicy, CounterSamplerConfig, GuardianAllocator, GuardianConfig, PoolConfig, ProcessSamplingConfig,
    ReportSink, ReporterConfig, SamplingPolicy,
};
use rand::{Rng, SeedableRng};

fn allocator(policy: SamplingPolicy) -> GuardianAllocator {
    GuardianAllocator::new(GuardianConfig {
        pool: PoolConfig {
            slot_count: 16,
            max_simultaneous_allocations: 16,
            alignment: AlignmentPolicy::Left,
            min_alignment: 1,
            seed: 3,
            ..PoolConfig::default()
        },
        policy,
        reporter: ReporterConfig {
            recoverable: true,
            sink: ReportSink::Capture { capacity: 4096 },
            module_offsets: false,
        },
        ..GuardianConfig::default()
    })
    .unwrap()
}

fn counter(rate: u32, seed: u64) -> SamplingPolicy {
    SamplingPolicy::Counter(CounterSamplerConfig {
        sample_rate: rate,
        rng_seed: Some(seed),
    })
}

/// Indices of the guarded allocations among `n` malloc/free pairs.
fn sampled_indices(a: &GuardianAllocator, n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    for i in 0..n {
        let p = a.malloc(16, 1);
        if a.is_guarded(p) {
            out.push(i);
        }
        unsafe { a.free(p) };
    }
    out
}

#[test]
fn skips_are_uniform_over_one_to_twice_the_rate() {
    let rate = 10u32;
    let n = 100_000;
    let mut rng = XorShift64Star::new(99);
    let mut counts = vec![0u64; 2 * rate as usize + 1];
    for _ in 0..n {
        let s = draw_skip(&mut rng, rate);
        assert!((1..=2 * rate).contains(&s));
        counts[s as usize] += 1;
    }
    let expected = n as f64 / (2 * rate) as f64;
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 19 degrees of freedom, p = 0.001.
    assert!(chi2 < 43.8, "chi-square {chi2:.1}");
}

#[test]
fn thread_state_gaps_average_the_rate() {
    let rate = 50;
    let mut s = ThreadSamplerState::new(
        CounterSamplerConfig {
            sample_rate: rate,
            rng_seed: Some(1),
        },
        0,
    );
    let (mut samples, mut calls) = (0u64, 0u64);
    while samples < 20_000 {
        calls += 1;
        samples += u64::from(s.want_to_sample());
    }
    // Mean skip is rate + 1/2 with standard deviation about rate / sqrt(3).
    let mean = calls as f64 / samples as f64;
    let sigma = rate as f64 / 3f64.sqrt() / (samples as f64).sqrt();
    assert!((mean - (rate as f64 + 0.5)).abs() < 5.0 * sigma, "mean gap {mean:.2}");
}

#[test]
fn allocator_sampling_rate_matches_configuration() {
    let rate = 100;
    let n = 200_000u64;
    let a = allocator(counter(rate, 11));
    let hits = sampled_indices(&a, n).len() as f64;
    let expected = n as f64 / (rate as f64 + 0.5);
    assert!((hits - expected).abs() < 5.0 * expected.sqrt(), "{hits} samples, expected about {expected:.0}");
    let s = a.stats();
    assert_eq!(s.sampled, hits as u64);
    assert_eq!(s.guarded, hits as u64);
}

#[test]
fn same_seed_same_sample_positions() {
    let first = sampled_indices(&allocator(counter(37, 5)), 50_000);
    let again = sampled_indices(&allocator(counter(37, 5)), 50_000);
    let other = sampled_indices(&allocator(counter(37, 6)), 50_000);
    assert!(!first.is_empty());
    assert_eq!(first, again);
    assert_ne!(first, other);
}

#[test]
fn threads_draw_independent_streams() {
    let a = Arc::new(allocator(counter(20, 8)));
    let runs: Vec<Vec<u64>> = (0..2)
        .map(|_| {
            let a = Arc::clone(&a);
            std::thread::spawn(move || sampled_indices(&a, 20_000)).join().unwrap()
        })
        .collect();
    assert!(runs.iter().all(|r| r.len() > 500));
    assert_ne!(runs[0], runs[1]);
}

#[test]
fn rate_one_samples_two_allocations_in_three() {
    // Skips are 1 or 2, so the mean gap is 1.5.
    let a = allocator(counter(1, 2));
    let hits = sampled_indices(&a, 30_000).len();
    assert!((19_500..=20_500).contains(&hits), "{hits}");
}

#[test]
fn process_sampling_enables_the_configured_fraction() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let config = ProcessSamplingConfig::one_in(128);
    let n = 256_000;
    let on = (0..n)
        .filter(|_| process_sampling_decision(config, rng.random()))
        .count() as f64;
    let expected = n as f64 / 128.0;
    assert!((on - expected).abs() < 5.0 * expected.sqrt(), "{on} of {n}");
    assert!(process_sampling_decision(ProcessSamplingConfig::ALWAYS, 0));
    assert!(!process_sampling_decision(ProcessSamplingConfig::NEVER, 0));
}

#[test]
fn mock_timer_emits_one_sample_per_interval() {
    for (span_ms, interval_ms, steps) in [(1000u64, 100u64, 100_000u64), (2500, 300, 7_777), (999, 1000, 1000)] {
        let gate = Arc::new(TimerGate::new());
        let clock = Arc::new(MockClock::new());
        let schedule = TimerSchedule::new(Duration::from_millis(interval_ms), clock.clone());
        let a = allocator(SamplingPolicy::Gate(Arc::clone(&gate)));
        let step = Duration::from_millis(span_ms) / steps as u32;
        let mut hits = 0u64;
        for _ in 0..steps {
            clock.advance(step);
            schedule.poll(&gate);
            let p = a.malloc(16, 1);
            hits += u64::from(a.is_guarded(p));
            unsafe { a.free(p) };
        }
        let expected = span_ms / interval_ms;
        assert!(hits.abs_diff(expected) <= 1, "{hits} samples over {span_ms} ms at {interval_ms} ms");
    }
}

#[test]
fn missed_deadlines_collapse_into_one_sample() {
    let gate = TimerGate::new();
    let clock = Arc::new(MockClock::new());
    let schedule = TimerSchedule::new(Duration::from_millis(10), clock.clone());
    clock.advance(Duration::from_millis(95));
    assert!(schedule.poll(&gate));
    assert!(!schedule.poll(&gate));
    assert!(gate.want_to_sample());
    assert!(!gate.want_to_sample());
    assert_eq!(schedule.until_next(), Duration::from_millis(5));
}
