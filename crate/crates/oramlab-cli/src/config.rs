use std::fs;
use std::path::Path;

use anyhow::Context;
use oramlab::engine::{EngineParams, EvictionPolicy};
use oramlab::trace::{gaussian_trace, load_trace, permutation_trace};
use oramlab::tree::{BlockId, BucketSchedule, TreeGeometry};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One experiment, fully specified: every run is a pure function of this
/// struct, so the summary digest is keyed on its canonical serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_blocks: u64,
    pub height: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    pub schedule: ScheduleSpec,
    pub mode: Mode,
    #[serde(default = "default_superblock_size")]
    pub superblock_size: usize,
    /// Look-ahead window in trace entries; superblocks never span windows.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub eviction: EvictionSpec,
    #[serde(default)]
    pub stash_hit_dummy_read: bool,
    pub trace: TraceSpec,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_block_size() -> usize {
    16
}

fn default_superblock_size() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pathoram,
    Laoram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// Same bucket size at every level.
    Uniform { z: usize },
    /// Bucket size shrinks linearly from `root` at the top to `leaf` at the
    /// bottom.
    Linear { root: usize, leaf: usize },
    /// `internal` slots everywhere except the leaf level.
    Step { internal: usize, leaf: usize },
    /// Explicit per-level sizes, root first.
    Explicit { sizes: Vec<usize> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvictionSpec {
    pub enabled: bool,
    pub high_watermark: usize,
    pub low_watermark: usize,
}

impl Default for EvictionSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            high_watermark: 500,
            low_watermark: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceSpec {
    /// `epochs` back-to-back uniform permutations of all blocks.
    Permutation {
        #[serde(default = "default_epochs")]
        epochs: usize,
    },
    /// `length` draws from a gaussian over the id range, rejection-sampled
    /// into bounds.
    Gaussian {
        length: usize,
        #[serde(default = "default_mean_frac")]
        mean_frac: f64,
        #[serde(default = "default_stddev_frac")]
        stddev_frac: f64,
    },
    /// One id per line; `#` comments and blank lines ignored.
    File { path: String },
}

fn default_epochs() -> usize {
    1
}

fn default_mean_frac() -> f64 {
    0.5
}

fn default_stddev_frac() -> f64 {
    0.15
}

/// The five independent streams. Fixed defaults keep unannotated configs
/// reproducible; `--seed auto` is the only source of entropy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub plan: u64,
    pub remap: u64,
    pub evict: u64,
    pub trace: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            plan: 2,
            remap: 3,
            evict: 4,
            trace: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// Hex digest of the canonical serialization; identical configs share it.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn build_schedule(&self) -> oramlab::Result<BucketSchedule> {
        let levels = self.height + 1;
        match &self.schedule {
            ScheduleSpec::Uniform { z } => BucketSchedule::uniform(*z, levels),
            ScheduleSpec::Linear { root, leaf } => BucketSchedule::linear(*root, *leaf, levels),
            ScheduleSpec::Step { internal, leaf } => BucketSchedule::step(*internal, *leaf, levels),
            ScheduleSpec::Explicit { sizes } => BucketSchedule::new(sizes.clone()),
        }
    }

    pub fn build_geometry(&self) -> oramlab::Result<TreeGeometry> {
        TreeGeometry::new(self.height, self.block_size, self.build_schedule()?)
    }

    pub fn build_policy(&self) -> oramlab::Result<EvictionPolicy> {
        EvictionPolicy::new(
            self.eviction.enabled,
            self.eviction.high_watermark,
            self.eviction.low_watermark,
        )
    }

    pub fn build_trace(&self) -> oramlab::Result<Vec<BlockId>> {
        match &self.trace {
            TraceSpec::Permutation { epochs } => {
                permutation_trace(self.n_blocks, *epochs, self.seeds.trace)
            }
            TraceSpec::Gaussian {
                length,
                mean_frac,
                stddev_frac,
            } => gaussian_trace(
                self.n_blocks,
                *length,
                *mean_frac,
                *stddev_frac,
                self.seeds.trace,
            ),
            TraceSpec::File { path } => load_trace(Path::new(path), self.n_blocks),
        }
    }

    pub fn engine_params(&self) -> oramlab::Result<EngineParams> {
        Ok(EngineParams {
            geometry: self.build_geometry()?,
            n_blocks: self.n_blocks,
            policy: self.build_policy()?,
            stash_hit_dummy_read: self.stash_hit_dummy_read,
            init_seed: self.seeds.init,
            evict_seed: self.seeds.evict,
        })
    }

    /// Every cross-field complaint a dry run can find without touching the
    /// filesystem. Empty means the config would construct cleanly.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.build_geometry() {
            Ok(geometry) => {
                if self.n_blocks == 0 {
                    out.push("n_blocks must be positive".into());
                } else if self.n_blocks > geometry.num_leaves() {
                    out.push(format!(
                        "{} blocks exceed the tree's {} leaves",
                        self.n_blocks,
                        geometry.num_leaves()
                    ));
                }
            }
            Err(e) => out.push(e.to_string()),
        }
        if self.superblock_size == 0 {
            out.push("superblock_size must be at least 1".into());
        }
        if self.window == Some(0) {
            out.push("window must be at least 1 entry".into());
        }
        if let Err(e) = self.build_policy() {
            out.push(e.to_string());
        }
        match &self.trace {
            TraceSpec::Permutation { epochs } => {
                if *epochs == 0 {
                    out.push("permutation trace needs at least one epoch".into());
                }
            }
            TraceSpec::Gaussian {
                length,
                mean_frac,
                stddev_frac,
            } => {
                if *length == 0 {
                    out.push("gaussian trace needs a positive length".into());
                }
                if !(0.0..=1.0).contains(mean_frac) {
                    out.push(format!("gaussian mean_frac {mean_frac} outside [0, 1]"));
                }
                if !stddev_frac.is_finite() || *stddev_frac <= 0.0 {
                    out.push(format!(
                        "gaussian stddev_frac {stddev_frac} must be positive and finite"
                    ));
                }
            }
            TraceSpec::File { .. } => {}
        }
        out
    }
}
