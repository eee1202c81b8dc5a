//! Distribution sorting under a direct-mapped cache model.
//!
//! The crate has three layers:
//!
//! * [`cache_sim`]: a trace-driven direct-mapped cache simulator.
//! * [`process`] and [`analysis`]: random access processes that model the
//!   permute phase of distribution sorting, and the analytical expressions
//!   (exact expectations, closed-form bounds) for their miss counts.
//! * [`dist_sort`] and [`radix_float`]: executable count/permute phases and an
//!   MSB radix sort for uniform floats whose parameters come from the analysis.
//!
//! [`experiment`] ties these together into CSV-producing runs used by the CLI.

pub mod analysis;
pub mod cache_sim;
pub mod dist;
pub mod dist_sort;
pub mod error;
pub mod experiment;
pub mod process;
pub mod radix_float;

pub use cache_sim::{CacheGeometry, MemRef, MissStats, Probe, Simulator, Tag};
pub use dist::ClassDistribution;
pub use error::{Error, Result};
