//! Allocation-site coverage policy.
//!
//! Once the pool is mostly occupied, a sampled allocation is only admitted
//! if no live guarded allocation shares its allocation stack. Membership is
//! tracked with a counting Bloom filter of 4-bit saturating counters.

/// Identity of an allocation site: a hash of its allocation stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoverageSource(pub u64);

/// Source assigned to allocations whose stack could not be captured.
pub const EMPTY_TRACE_SOURCE: CoverageSource = CoverageSource(0x6a09_e667_f3bc_c908);

pub const DEFAULT_COUNTERS: usize = 1024;
pub const DEFAULT_HASHES: u32 = 2;
pub const DEFAULT_UTILIZATION_THRESHOLD: f64 = 0.75;

const COUNTER_MAX: u8 = 15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

/// Deterministic hash of a frame address sequence.
pub fn source_of(trace: &[usize]) -> CoverageSource {
    if trace.is_empty() {
        return EMPTY_TRACE_SOURCE;
    }
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ trace.len() as u64;
    for &pc in trace {
        h = mix64(h ^ pc as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    }
    let h = mix64(h);
    if h == EMPTY_TRACE_SOURCE.0 {
        CoverageSource(h ^ 1)
    } else {
        CoverageSource(h)
    }
}

#[derive(Debug, Clone)]
pub struct CoverageFilter {
    nibbles: Box<[u8]>,
    counters: usize,
    hashes: u32,
    threshold: f64,
    saturated: usize,
}

impl Default for CoverageFilter {
    fn default() -> Self {
        Self::new(DEFAULT_COUNTERS, DEFAULT_HASHES, DEFAULT_UTILIZATION_THRESHOLD)
    }
}

impl CoverageFilter {
    pub fn new(counters: usize, hashes: u32, threshold: f64) -> Self {
        assert!(counters > 0 && hashes > 0);
        assert!((0.0..=1.0).contains(&threshold));
        Self {
            nibbles: vec![0; counters.div_ceil(2)].into_boxed_slice(),
            counters,
            hashes,
            threshold,
            saturated: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    // Double hashing over the two halves of the source hash.
    fn position(&self, source: CoverageSource, i: u32) -> usize {
        let h1 = source.0 & 0xffff_ffff;
        let h2 = (source.0 >> 32) | 1;
        (h1.wrapping_add(u64::from(i).wrapping_mul(h2)) % self.counters as u64) as usize
    }

    fn get(&self, i: usize) -> u8 {
        let byte = self.nibbles[i / 2];
        if i % 2 == 0 {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    fn set(&mut self, i: usize, v: u8) {
        let byte = &mut self.nibbles[i / 2];
        if i % 2 == 0 {
            *byte = (*byte & 0xf0) | v;
        } else {
            *byte = (*byte & 0x0f) | (v << 4);
        }
    }

    pub fn insert(&mut self, source: CoverageSource) {
        for k in 0..self.hashes {
            let i = self.position(source, k);
            let v = self.get(i);
            if v < COUNTER_MAX {
                self.set(i, v + 1);
                if v + 1 == COUNTER_MAX {
                    self.saturated += 1;
                }
            }
        }
    }

    /// Saturated counters are never decremented.
    pub fn remove(&mut self, source: CoverageSource) {
        for k in 0..self.hashes {
            let i = self.position(source, k);
            let v = self.get(i);
            if v > 0 && v < COUNTER_MAX {
                self.set(i, v - 1);
            }
        }
    }

    pub fn query(&self, source: CoverageSource) -> bool {
        (0..self.hashes).all(|k| self.get(self.position(source, k)) > 0)
    }

    /// Below the utilization threshold everything is admitted; at or above
    /// it, only sources with no live allocation.
    pub fn admit(&self, pool_utilization: f64, source: CoverageSource) -> bool {
        pool_utilization < self.threshold || !self.query(source)
    }

    pub fn saturated_counters(&self) -> usize {
        self.saturated
    }

    /// True once more than 1% of counters are stuck at saturation.
    pub fn needs_rebuild(&self) -> bool {
        self.saturated * 100 > self.counters
    }

    /// Resets the filter to exactly the given live sources.
    pub fn rebuild(&mut self, live: impl IntoIterator<Item = CoverageSource>) {
        self.nibbles.fill(0);
        self.saturated = 0;
        for s in live {
            self.insert(s);
        }
    }
}
