use std::fmt::Write as _;
use std::sync::mpsc::sync_channel;
use std::thread;

use anyhow::{anyhow, bail, Context};
use oramlab::client::SuperblockPlan;
use oramlab::engine::{AccessOp, Engine, FetchKind, LeafFetch};
use oramlab::metrics::{chi_square_uniformity, dummy_read_ratio, traffic_reduction, Counters};
use oramlab::preprocess::{pipeline_feed, ScanConfig};
use oramlab::rng::LeafStream;
use oramlab::tree::BlockId;
use oramlab::OramError;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Mode, ScheduleSpec, TraceSpec};

/// How many plans the preprocessor may run ahead of the engine before its
/// thread blocks.
const PLAN_CHANNEL_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config_digest: String,
    pub counters: CounterBlock,
    pub dummy_read_ratio: f64,
    pub traffic: Traffic,
    pub stash: StashBlock,
    /// Chi-square of the fetched-leaf histogram against uniform; absent when
    /// the run is too short for the five-per-cell rule.
    pub uniformity: Option<Uniformity>,
    pub leaf_log_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterBlock {
    pub real_accesses: u64,
    pub real_path_reads: u64,
    pub dummy_reads: u64,
    pub blocks_transferred: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Traffic {
    pub blocks_transferred: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StashBlock {
    pub peak: u64,
    #[serde(rename = "final")]
    pub final_occupancy: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Uniformity {
    pub chi2: f64,
    pub p: f64,
}

pub struct RunOutput {
    pub summary: Summary,
    pub timeline_csv: String,
    pub leaf_log_csv: String,
    pub counters: Counters,
}

/// Runs the full pipeline for one config: trace generation, preprocessing
/// (laoram mode, on its own thread), the access loop with the eviction
/// policy, then metric extraction.
pub fn execute(config: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let violations = config.violations();
    if !violations.is_empty() {
        bail!("invalid config: {}", violations.join("; "));
    }
    let trace = config.build_trace()?;
    if trace.is_empty() {
        bail!("the trace is empty; nothing to run");
    }
    let mut engine = build_engine(config, &trace)?;
    for &id in &trace {
        engine.process(id, AccessOp::Read)?;
    }
    finish(config, engine)
}

fn build_engine(config: &ExperimentConfig, trace: &[BlockId]) -> anyhow::Result<Engine> {
    let params = config.engine_params()?;
    let num_leaves = params.geometry.num_leaves();
    match config.mode {
        Mode::Pathoram => {
            // The assignment stream doubles as the plan stream so that a
            // degenerate one-wide laoram run reproduces it draw for draw.
            Ok(Engine::new_pathoram(params, config.seeds.plan)?)
        }
        Mode::Laoram => {
            let plans = preprocess_on_thread(config, trace, num_leaves)?;
            Ok(Engine::new_lookahead(
                params,
                plans,
                config.superblock_size,
                config.seeds.remap,
            )?)
        }
    }
}

/// Scans the trace on a producer thread and drains the bounded plan channel
/// into a vector. Plan-aware initial placement needs the full plan list
/// before the engine starts, so the handoff completes up front.
fn preprocess_on_thread(
    config: &ExperimentConfig,
    trace: &[BlockId],
    num_leaves: u64,
) -> anyhow::Result<Vec<SuperblockPlan>> {
    let scan_config = ScanConfig {
        superblock_size: config.superblock_size,
        window: config.window,
    };
    let (sender, receiver) = sync_channel(PLAN_CHANNEL_CAPACITY);
    let plan_seed = config.seeds.plan;
    let trace = trace.to_vec();
    let producer = thread::spawn(move || -> oramlab::Result<u64> {
        let mut stream = LeafStream::new(plan_seed, num_leaves);
        pipeline_feed(&trace, scan_config, &mut stream, sender)
    });
    let plans: Vec<SuperblockPlan> = receiver.into_iter().collect();
    producer
        .join()
        .map_err(|_| anyhow!("preprocessor thread panicked"))?
        .context("preprocessing the trace")?;
    Ok(plans)
}

fn finish(config: &ExperimentConfig, engine: Engine) -> anyhow::Result<RunOutput> {
    let counters = engine.counters().clone();
    let leaf_log_csv = render_leaf_log(engine.leaf_log());
    let timeline_csv = render_timeline(&counters);
    let uniformity = leaf_histogram_test(engine.leaf_log(), engine.geometry().num_leaves());
    let summary = Summary {
        config_digest: config.digest(),
        counters: CounterBlock {
            real_accesses: counters.real_accesses,
            real_path_reads: counters.real_path_reads,
            dummy_reads: counters.dummy_reads,
            blocks_transferred: counters.blocks_transferred,
        },
        dummy_read_ratio: dummy_read_ratio(&counters)?,
        traffic: Traffic {
            blocks_transferred: counters.blocks_transferred,
            reduction_vs_baseline: None,
        },
        stash: StashBlock {
            peak: counters.stash_peak,
            final_occupancy: engine.stash_occupancy() as u64,
        },
        uniformity,
        leaf_log_digest: hex::encode(Sha256::digest(leaf_log_csv.as_bytes())),
    };
    Ok(RunOutput {
        summary,
        timeline_csv,
        leaf_log_csv,
        counters,
    })
}

fn render_leaf_log(log: &[LeafFetch]) -> String {
    let mut csv = String::with_capacity(16 + log.len() * 12);
    csv.push_str("step,leaf,kind\n");
    for fetch in log {
        let kind = match fetch.kind {
            FetchKind::Real => "real",
            FetchKind::Dummy => "dummy",
        };
        writeln!(csv, "{},{},{kind}", fetch.step, fetch.leaf).expect("string write");
    }
    csv
}

fn render_timeline(counters: &Counters) -> String {
    let mut csv = String::with_capacity(24 + counters.stash_timeline.len() * 8);
    csv.push_str("step,stash_occupancy\n");
    for (step, occupancy) in &counters.stash_timeline {
        writeln!(csv, "{step},{occupancy}").expect("string write");
    }
    csv
}

/// The storage side sees every fetch, dummy or real, so the uniformity check
/// pools them all.
fn leaf_histogram_test(log: &[LeafFetch], num_leaves: u64) -> Option<Uniformity> {
    let mut histogram = vec![0u64; num_leaves as usize];
    for fetch in log {
        histogram[fetch.leaf as usize] += 1;
    }
    match chi_square_uniformity(&histogram) {
        Ok(result) => Some(Uniformity {
            chi2: result.statistic,
            p: result.p_value,
        }),
        Err(OramError::InsufficientSamples { .. } | OramError::InvalidParameter(_)) => None,
        Err(e) => unreachable!("uniformity test failed structurally: {e}"),
    }
}

/// One sweep row: the baseline plus one row per axis value, reductions
/// measured against the baseline's traffic.
#[derive(Debug, Clone)]
struct SweepRow {
    axis: String,
    value: String,
    dummy_read_ratio: f64,
    traffic_reduction: f64,
    stash_peak: u64,
}

/// Runs the shared-seed baseline (classic engine, same config otherwise) and
/// one run per value along the axis; returns the result table as CSV.
pub fn sweep(config: &ExperimentConfig, axis: &str, values: &[String]) -> anyhow::Result<String> {
    let mut baseline_config = config.clone();
    baseline_config.mode = Mode::Pathoram;
    let baseline = execute(&baseline_config).context("baseline run")?;

    let mut rows = vec![SweepRow {
        axis: axis.to_string(),
        value: "baseline".into(),
        dummy_read_ratio: baseline.summary.dummy_read_ratio,
        traffic_reduction: 1.0,
        stash_peak: baseline.summary.stash.peak,
    }];
    for value in values {
        let varied = apply_axis(config, axis, value)?;
        let run = execute(&varied).with_context(|| format!("run for {axis}={value}"))?;
        rows.push(SweepRow {
            axis: axis.to_string(),
            value: value.clone(),
            dummy_read_ratio: run.summary.dummy_read_ratio,
            traffic_reduction: traffic_reduction(&baseline.counters, &run.counters)?,
            stash_peak: run.summary.stash.peak,
        });
    }

    let mut csv = String::from("axis,value,dummy_read_ratio,traffic_reduction,stash_peak\n");
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.axis, row.value, row.dummy_read_ratio, row.traffic_reduction, row.stash_peak
        )
        .expect("string write");
    }
    Ok(csv)
}

/// Applies one sweep-axis value to a copy of the config. Value syntax:
/// `s` takes integers; `schedule` takes `uniform:Z`, `linear:ROOT-LEAF`,
/// `step:INTERNAL-LEAF`; `trace` takes `permutation:EPOCHS` or
/// `gaussian:LENGTH`; `watermarks` takes `HIGH-LOW`.
pub fn apply_axis(
    config: &ExperimentConfig,
    axis: &str,
    value: &str,
) -> anyhow::Result<ExperimentConfig> {
    let mut varied = config.clone();
    match axis {
        "s" => {
            varied.superblock_size = value
                .parse()
                .with_context(|| format!("superblock size {value:?}"))?;
        }
        "schedule" => {
            let (kind, params) = value
                .split_once(':')
                .ok_or_else(|| anyhow!("schedule value {value:?} wants kind:params"))?;
            varied.schedule = match kind {
                "uniform" => ScheduleSpec::Uniform {
                    z: params
                        .parse()
                        .with_context(|| format!("uniform size {params:?}"))?,
                },
                "linear" => {
                    let (root, leaf) = split_pair(params)?;
                    ScheduleSpec::Linear { root, leaf }
                }
                "step" => {
                    let (internal, leaf) = split_pair(params)?;
                    ScheduleSpec::Step { internal, leaf }
                }
                other => bail!("unknown schedule kind {other:?}"),
            };
        }
        "trace" => {
            let (kind, params) = value
                .split_once(':')
                .ok_or_else(|| anyhow!("trace value {value:?} wants kind:params"))?;
            varied.trace = match kind {
                "permutation" => TraceSpec::Permutation {
                    epochs: params
                        .parse()
                        .with_context(|| format!("epoch count {params:?}"))?,
                },
                "gaussian" => TraceSpec::Gaussian {
                    length: params
                        .parse()
                        .with_context(|| format!("trace length {params:?}"))?,
                    mean_frac: 0.5,
                    stddev_frac: 0.15,
                },
                other => bail!("unknown trace kind {other:?}"),
            };
        }
        "watermarks" => {
            let (high, low) = split_pair(value)?;
            varied.eviction.high_watermark = high;
            varied.eviction.low_watermark = low;
        }
        other => bail!("unknown sweep axis {other:?} (s, schedule, trace, watermarks)"),
    }
    Ok(varied)
}

fn split_pair(text: &str) -> anyhow::Result<(usize, usize)> {
    let (a, b) = text
        .split_once('-')
        .ok_or_else(|| anyhow!("{text:?} wants the form A-B"))?;
    Ok((
        a.parse().with_context(|| format!("number {a:?}"))?,
        b.parse().with_context(|| format!("number {b:?}"))?,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub valid: bool,
    pub violations: Vec<String>,
    /// Flat array of all blocks, no tree padding.
    pub raw_bytes: u64,
    /// Every bucket slot at the configured block size; 0 when the geometry
    /// itself is invalid.
    pub tree_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_overhead_vs_raw: Option<f64>,
    /// Slot overhead of this schedule against a uniform tree whose bucket
    /// size equals this schedule's leaf size (0 for uniform schedules).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overhead_vs_uniform_leaf: Option<f64>,
}

pub fn validate(config: &ExperimentConfig) -> ValidateReport {
    let violations = config.violations();
    let raw_bytes = config.n_blocks * config.block_size as u64;
    let mut tree_bytes = 0;
    let mut tree_overhead_vs_raw = None;
    let mut overhead_vs_uniform_leaf = None;
    if let Ok(geometry) = config.build_geometry() {
        tree_bytes = geometry.storage_bytes();
        if raw_bytes > 0 {
            tree_overhead_vs_raw = Some(tree_bytes as f64 / raw_bytes as f64);
        }
        let leaf_z = geometry.schedule().size_at(config.height);
        if let Ok(uniform) = oramlab::tree::BucketSchedule::uniform(leaf_z, config.height + 1) {
            let uniform_slots: u64 = (0..=config.height)
                .map(|level| uniform.size_at(level) as u64 * (1u64 << level))
                .sum();
            let slots: u64 = (0..=config.height)
                .map(|level| geometry.schedule().size_at(level) as u64 * (1u64 << level))
                .sum();
            overhead_vs_uniform_leaf = Some(slots as f64 / uniform_slots as f64 - 1.0);
        }
    }
    ValidateReport {
        valid: violations.is_empty(),
        violations,
        raw_bytes,
        tree_bytes,
        tree_overhead_vs_raw,
        overhead_vs_uniform_leaf,
    }
}
