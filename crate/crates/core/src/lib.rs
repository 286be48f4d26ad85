//! Sampled guard-page heap error detection.
//!
//! A small fraction of allocations, chosen by a cheap sampler, is served
//! from a pool of page-sized slots separated by inaccessible guard pages.
//! Out-of-bounds accesses that cross into a guard page and accesses to freed
//! slots fault; the fault handler classifies the access and prints a report
//! with the allocation and deallocation stacks.
//!
//! [`GuardianAllocator`] is the explicit-handle API; [`GuardedGlobalAlloc`]
//! installs the same machinery as Rust's global allocator.

pub mod compress;
pub mod config;
pub mod coverage;
pub mod global;
pub mod handler;
pub mod metadata;
pub mod platform;
pub mod pool;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod shim;
pub mod trace;

pub use global::GuardedGlobalAlloc;
pub use handler::{determine_access_kind, FaultContext, ReportSink, ReporterConfig};
pub use pool::{AlignmentPolicy, AlignmentSide, GuardedPool, PoolConfig, PoolError};
pub use report::{parse_report, AccessKind, ErrorKind, ErrorReport, Locator, ModuleTable, ParseError};
pub use sampler::{CounterSamplerConfig, ProcessSamplingConfig};
pub use shim::{
    CoverageConfig, Guardian, GuardianAllocator, GuardianConfig, GuardianError, GuardianStats,
    HostAllocator, LibcMalloc, SamplingPolicy,
};
