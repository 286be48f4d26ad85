use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::hint::black_box;

use gwpasan::coverage::{source_of, CoverageFilter, CoverageSource};
use gwpasan::{
    AlignmentPolicy, CounterSamplerConfig, CoverageConfig, GuardianAllocator, GuardianConfig, PoolConfig,
    ReportSink, ReporterConfig, SamplingPolicy,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn key(k: u64) -> CoverageSource {
    source_of(&[0x40_0000 + k as usize * 0x40, 0x40_1000])
}

/// Interleaved inserts and removes against a multiset, with the same
/// rebuild-on-saturation rule the allocator applies.
fn interleave(counters: usize, universe: u64, ops: usize, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut f = CoverageFilter::new(counters, 2, 0.75);
    let mut live: HashMap<u64, u32> = HashMap::new();
    for op in 0..ops {
        let k = rng.random_range(0..universe);
        let n = live.entry(k).or_default();
        if rng.random_bool(0.5) {
            f.insert(key(k));
            *n += 1;
        } else if *n > 0 {
            f.remove(key(k));
            *n -= 1;
            if f.needs_rebuild() {
                f.rebuild(live.iter().flat_map(|(&k, &c)| std::iter::repeat_n(key(k), c as usize)));
            }
        }
        for (&k, &c) in &live {
            assert!(c == 0 || f.query(key(k)), "false negative for {k} after op {op}");
        }
    }
}

#[test]
fn no_false_negatives_over_a_hundred_thousand_operations() {
    interleave(1024, 64, 100_000, 1);
}

#[test]
fn no_false_negatives_with_a_tiny_saturating_filter() {
    interleave(32, 200, 20_000, 2);
}

#[test]
fn false_positive_rate_matches_theory() {
    let (m, k, n) = (1024usize, 2u32, 100u64);
    let mut f = CoverageFilter::new(m, k, 0.75);
    for i in 0..n {
        f.insert(key(i));
    }
    let trials = 100_000u64;
    let fp = (n..n + trials).filter(|&i| f.query(key(i))).count() as f64 / trials as f64;
    let theory = (1.0 - (-(k as f64) * n as f64 / m as f64).exp()).powi(k as i32);
    assert!((fp - theory).abs() < 0.01, "observed {fp:.4}, theory {theory:.4}");
}

fn allocator(coverage: bool) -> GuardianAllocator {
    GuardianAllocator::new(GuardianConfig {
        pool: PoolConfig {
            slot_count: 16,
            max_simultaneous_allocations: 16,
            alignment: AlignmentPolicy::Left,
            min_alignment: 1,
            seed: 5,
            ..PoolConfig::default()
        },
        policy: SamplingPolicy::Counter(CounterSamplerConfig {
            sample_rate: 1,
            rng_seed: Some(5),
        }),
        coverage: coverage.then(|| CoverageConfig {
            utilization_threshold: 0.75,
            ..CoverageConfig::default()
        }),
        reporter: ReporterConfig {
            recoverable: true,
            sink: ReportSink::Capture { capacity: 4096 },
            module_offsets: false,
        },
        ..GuardianConfig::default()
    })
    .unwrap()
}

/// Allocation site `depth`: each recursion depth is a distinct stack.
#[inline(never)]
fn site(a: &GuardianAllocator, depth: usize) -> *mut u8 {
    if depth == 0 {
        a.malloc(64, 1)
    } else {
        black_box(site(a, black_box(depth - 1)))
    }
}

/// One hot site making 90% of allocations and 32 cold sites. Hot blocks
/// live for 48 allocations and cold ones for 400, so both would fill the
/// pool on their own. Returns the number of pool slots held by cold sites,
/// averaged over the second half of the run.
fn cold_slots(coverage: bool) -> f64 {
    let a = allocator(coverage);
    let mut rng = StdRng::seed_from_u64(9);
    let mut live: BinaryHeap<Reverse<(usize, usize, bool)>> = BinaryHeap::new();
    let (rounds, mut sum, mut samples) = (20_000, 0usize, 0usize);
    for round in 0..rounds {
        while live.peek().is_some_and(|Reverse((expiry, _, _))| *expiry <= round) {
            let Reverse((_, p, _)) = live.pop().unwrap();
            unsafe { a.free(p as *mut u8) };
        }
        let cold = rng.random_bool(0.1);
        let depth = if cold { rng.random_range(1..=32) } else { 0 };
        let p = site(&a, depth);
        let lifetime = if cold { 400 } else { 48 };
        live.push(Reverse((round + lifetime, p as usize, cold)));
        if round >= rounds / 2 {
            sum += live
                .iter()
                .filter(|Reverse((_, p, c))| *c && a.is_guarded(*p as *const u8))
                .count();
            samples += 1;
        }
    }
    for Reverse((_, p, _)) in live {
        unsafe { a.free(p as *mut u8) };
    }
    assert!(a.reports().is_empty(), "{}", a.report_text());
    sum as f64 / samples as f64
}

#[test]
fn coverage_reserves_slots_for_cold_sites() {
    let with = cold_slots(true);
    let without = cold_slots(false);
    eprintln!("cold slots: {with:.2} with coverage, {without:.2} without");
    assert!(with >= 4.0, "cold slots with coverage: {with:.2}");
    assert!(with > without, "with {with:.2}, without {without:.2}");
}
