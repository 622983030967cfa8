//! Access-trace synthesis and loading.
//!
//! A trace is a sequence of block ids. The permutation workload visits every
//! block exactly once per epoch in a seeded random order, which gives the
//! recurrence structure with the least reuse and therefore the worst dummy
//! pressure. The Gaussian workload models skewed embedding-table access:
//! ids cluster around `mean_frac * n_blocks`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{OramError, Result};
use crate::rng::trace_rng;
use crate::tree::BlockId;

/// Consecutive Gaussian draws rejected before the parameters are declared
/// degenerate.
const MAX_CONSECUTIVE_REJECTIONS: u64 = 1_000;

/// Concatenation of `epochs` independent random permutations of `0..n_blocks`.
pub fn permutation_trace(n_blocks: u64, epochs: usize, seed: u64) -> Result<Vec<BlockId>> {
    if n_blocks == 0 {
        return Err(OramError::InvalidParameter(
            "permutation over zero blocks".into(),
        ));
    }
    let mut rng = trace_rng(seed);
    let mut trace = Vec::with_capacity(n_blocks as usize * epochs);
    let mut epoch: Vec<BlockId> = (0..n_blocks).collect();
    for _ in 0..epochs {
        epoch.shuffle(&mut rng);
        trace.extend_from_slice(&epoch);
    }
    Ok(trace)
}

/// `count` draws of `round(Normal(mean_frac * n, stddev_frac * n))`, resampled
/// until the value lands in `[0, n)`. Degenerate parameters that reject
/// [`MAX_CONSECUTIVE_REJECTIONS`] draws in a row are an error rather than a
/// silent spin.
pub fn gaussian_trace(
    n_blocks: u64,
    count: usize,
    mean_frac: f64,
    stddev_frac: f64,
    seed: u64,
) -> Result<Vec<BlockId>> {
    if n_blocks == 0 {
        return Err(OramError::InvalidParameter(
            "gaussian trace over zero blocks".into(),
        ));
    }
    if !(0.0..=1.0).contains(&mean_frac) {
        return Err(OramError::InvalidParameter(format!(
            "mean_frac {mean_frac} outside [0, 1]"
        )));
    }
    if !stddev_frac.is_finite() || stddev_frac <= 0.0 {
        return Err(OramError::InvalidParameter(format!(
            "stddev_frac {stddev_frac} must be positive and finite"
        )));
    }
    let n = n_blocks as f64;
    let normal = Normal::new(mean_frac * n, stddev_frac * n)
        .map_err(|e| OramError::InvalidParameter(format!("gaussian parameters: {e}")))?;
    let mut rng = trace_rng(seed);
    let mut trace = Vec::with_capacity(count);
    let mut rejections = 0u64;
    while trace.len() < count {
        let draw = normal.sample(&mut rng).round();
        if draw >= 0.0 && draw < n {
            trace.push(draw as BlockId);
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(OramError::GaussianRejectionOverflow(rejections));
            }
        }
    }
    Ok(trace)
}

/// Reads a trace file: UTF-8, one decimal block id per line. Lines starting
/// with `#` and blank lines are skipped. Ids must be below `n_blocks`.
pub fn load_trace(path: &Path, n_blocks: u64) -> Result<Vec<BlockId>> {
    let reader = BufReader::new(File::open(path)?);
    let mut trace = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let id: BlockId = text.parse().map_err(|e| OramError::TraceParse {
            line: line_no,
            reason: format!("{e}: {text:?}"),
        })?;
        if id >= n_blocks {
            return Err(OramError::TraceIndexRange {
                line: line_no,
                id,
                n_blocks,
            });
        }
        trace.push(id);
    }
    Ok(trace)
}
