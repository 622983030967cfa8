//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OramError {
    #[error("leaf {leaf} out of range, tree has {num_leaves} leaves")]
    LeafOutOfRange { leaf: u64, num_leaves: u64 },

    #[error("block id {id} out of range, store holds {n_blocks} blocks")]
    BlockOutOfRange { id: u64, n_blocks: u64 },

    #[error("invalid bucket schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("path of {got} buckets written to a tree of height {height} (want {want})")]
    PathLengthMismatch {
        got: usize,
        want: usize,
        height: usize,
    },

    #[error("bucket at level {level} holds {count} blocks, capacity {capacity}")]
    BucketOverflow {
        level: usize,
        count: usize,
        capacity: usize,
    },

    #[error("block {id} inserted into stash twice")]
    DuplicateStashBlock { id: u64 },

    #[error("plan {seq} consumed out of order for block {id}")]
    PlanOutOfOrder { seq: u64, id: u64 },

    #[error("no pending plan contains block {id}")]
    PlanMissing { id: u64 },

    #[error("block {id} assigned leaf {position} but its plan expects leaf {planned}")]
    PlanPositionMismatch {
        id: u64,
        position: u64,
        planned: u64,
    },

    #[error("eviction stalled: {issued} dummy reads left stash at {occupancy}")]
    EvictionStall { issued: u64, occupancy: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("eviction watermarks invalid: high {high} must exceed low {low}")]
    InvalidWatermarks { high: usize, low: usize },

    #[error("trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error("trace line {line}: block id {id} out of range for {n_blocks} blocks")]
    TraceIndexRange { line: usize, id: u64, n_blocks: u64 },

    #[error("gaussian sampler rejected {0} consecutive draws; parameters leave too little mass in range")]
    GaussianRejectionOverflow(u64),

    #[error("histogram needs at least {needed} draws for {cells} cells, got {got}")]
    InsufficientSamples { needed: u64, got: u64, cells: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("leaf logs differ in length: {a} vs {b}")]
    LogLengthMismatch { a: usize, b: usize },

    #[error("snapshot malformed: {0}")]
    SnapshotFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OramError>;
