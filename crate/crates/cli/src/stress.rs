//! Multi-threaded allocation stress against one allocator instance.

use std::sync::Arc;
use std::thread;

use gwpasan::rng::{derive_seed, XorShift64Star};
use gwpasan::{AlignmentPolicy, GuardianAllocator};

use crate::options::{Format, HarnessConfig, HarnessError, Record};

pub const DEFAULT_SAMPLE_RATE: u32 = 16;
pub const DEFAULT_ITERATIONS: u64 = 200_000;
pub const DEFAULT_THREADS: usize = 4;
const LIVE_PER_THREAD: usize = 64;
const MAX_SIZE: u64 = 512;

#[derive(Debug, Clone, Default)]
pub struct StressResult {
    pub threads: usize,
    pub operations: u64,
    pub guarded: u64,
    /// Blocks whose contents changed while they were live.
    pub corrupted: u64,
    pub reports: u64,
    pub live_after: usize,
}

impl StressResult {
    pub fn clean(&self) -> bool {
        self.corrupted == 0 && self.reports == 0 && self.live_after == 0
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Human => format!(
                "{} threads, {} operations, {} guarded, {} corrupted, {} reports, {} live after teardown: {}\n",
                self.threads,
                self.operations,
                self.guarded,
                self.corrupted,
                self.reports,
                self.live_after,
                if self.clean() { "ok" } else { "FAILED" }
            ),
            Format::Records => {
                let rec = Record::new("stress")
                    .field("threads", self.threads)
                    .field("operations", self.operations)
                    .field("guarded", self.guarded)
                    .field("corrupted", self.corrupted)
                    .field("reports", self.reports)
                    .field("live_after", self.live_after)
                    .field("clean", u8::from(self.clean()));
                format!("{rec}\n")
            }
        }
    }
}

struct Block {
    ptr: *mut u8,
    size: usize,
    tag: u8,
}

fn intact(b: &Block) -> bool {
    // SAFETY: b is live for b.size bytes.
    unsafe { std::slice::from_raw_parts(b.ptr, b.size) }.iter().all(|&x| x == b.tag)
}

fn worker(a: &GuardianAllocator, seed: u64, iterations: u64) -> u64 {
    let mut rng = XorShift64Star::new(seed);
    let mut live: Vec<Block> = Vec::with_capacity(LIVE_PER_THREAD);
    let mut corrupted = 0;
    for i in 0..iterations {
        if live.len() == LIVE_PER_THREAD || (!live.is_empty() && rng.coin()) {
            let b = live.swap_remove(rng.below(live.len() as u64) as usize);
            corrupted += u64::from(!intact(&b));
            // SAFETY: b.ptr is live and removed from the set.
            unsafe { a.free(b.ptr) };
        } else {
            let size = 1 + rng.below(MAX_SIZE) as usize;
            let ptr = a.malloc(size, 1);
            assert!(!ptr.is_null(), "allocation failed");
            let tag = i as u8 | 1;
            // SAFETY: ptr is valid for size bytes.
            unsafe { ptr.write_bytes(tag, size) };
            live.push(Block { ptr, size, tag });
        }
    }
    for b in live {
        corrupted += u64::from(!intact(&b));
        // SAFETY: as above.
        unsafe { a.free(b.ptr) };
    }
    corrupted
}

pub fn run(config: &HarnessConfig, threads: usize) -> Result<StressResult, HarnessError> {
    let iterations = config.iterations_or(DEFAULT_ITERATIONS);
    let threads = threads.max(1);
    let a = Arc::new(GuardianAllocator::new(
        config.guardian_config(DEFAULT_SAMPLE_RATE, AlignmentPolicy::Random)?,
    )?);
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let a = Arc::clone(&a);
            let seed = derive_seed(config.seed, t as u64);
            thread::spawn(move || worker(&a, seed, iterations))
        })
        .collect();
    let mut corrupted = 0;
    for h in handles {
        corrupted += h
            .join()
            .map_err(|_| HarnessError::Failed("stress worker panicked".into()))?;
    }
    let stats = a.stats();
    Ok(StressResult {
        threads,
        operations: iterations * threads as u64,
        guarded: stats.guarded,
        corrupted,
        reports: stats.reports,
        live_after: stats.live,
    })
}
