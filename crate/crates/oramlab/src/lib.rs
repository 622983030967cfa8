//! A trace-driven Oblivious-RAM laboratory: path-tree engines with optional
//! look-ahead superblock scheduling, fat bucket schedules, background
//! eviction, trace generators, and the statistics used to check that access
//! patterns stay oblivious.

pub mod client;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod preprocess;
pub mod rng;
pub mod trace;
pub mod tree;

pub use error::{OramError, Result};
