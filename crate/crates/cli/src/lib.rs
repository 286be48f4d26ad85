//! Harness for the gwpasan allocator: fault injection, sampling statistics,
//! an overhead benchmark, a multi-threaded stress run and a report parser.
//! The `gwpasan` binary is a thin command-line layer over these modules.

pub mod bench;
pub mod inject;
pub mod options;
pub mod parse;
pub mod stats;
pub mod stress;

pub use options::{Format, HarnessConfig, HarnessError, Policy};
