//! Look-ahead preprocessing: bins future trace entries into superblocks and
//! assigns each bin the uniformly drawn leaf its one-path fetch will use.
//!
//! The scan keeps a single open bin. Each trace entry joins the open bin
//! unless it is already a member (duplicates within one bin collapse: the
//! shared fetch serves both requests, and the member's multiplicity counts
//! the servings owed). A bin closes when it reaches the superblock size; the
//! final bin may be short. When a look-ahead window is set, bins never span
//! a window boundary, so a short bin is emitted at each window end.

use std::collections::HashMap;
use std::sync::mpsc::SyncSender;

use crate::client::SuperblockPlan;
use crate::error::{OramError, Result};
use crate::rng::LeafStream;
use crate::tree::BlockId;

/// Scan parameters: target superblock size and optional look-ahead window
/// (trace entries per preprocessing batch; `None` scans the whole trace as
/// one batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanConfig {
    pub superblock_size: usize,
    pub window: Option<usize>,
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.superblock_size == 0 {
            return Err(OramError::InvalidParameter(
                "superblock size must be positive".into(),
            ));
        }
        if self.window == Some(0) {
            return Err(OramError::InvalidParameter(
                "window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One closed bin: distinct members in arrival order, and per member the
/// number of trace entries that collapsed into it (always ≥ 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bin {
    pub members: Vec<BlockId>,
    pub multiplicities: Vec<u64>,
}

/// Bins one trace segment. Deduplication is scoped to the open bin only; a
/// block may appear in any number of closed bins.
pub fn scan(segment: &[BlockId], config: ScanConfig) -> Result<Vec<Bin>> {
    config.validate()?;
    let s = config.superblock_size;
    let mut bins = Vec::new();
    let mut members: Vec<BlockId> = Vec::with_capacity(s);
    let mut multiplicities: Vec<u64> = Vec::with_capacity(s);
    let mut open_index: HashMap<BlockId, usize> = HashMap::with_capacity(s);
    for &id in segment {
        if let Some(&i) = open_index.get(&id) {
            multiplicities[i] += 1;
            continue;
        }
        open_index.insert(id, members.len());
        members.push(id);
        multiplicities.push(1);
        if members.len() == s {
            bins.push(Bin {
                members: std::mem::take(&mut members),
                multiplicities: std::mem::take(&mut multiplicities),
            });
            open_index.clear();
        }
    }
    if !members.is_empty() {
        bins.push(Bin {
            members,
            multiplicities,
        });
    }
    Ok(bins)
}

/// Bins a whole trace, restarting the open bin at every window boundary.
pub fn scan_windows(trace: &[BlockId], config: ScanConfig) -> Result<Vec<Bin>> {
    config.validate()?;
    let window = config.window.unwrap_or(usize::MAX).max(1);
    let mut bins = Vec::new();
    if trace.is_empty() {
        return Ok(bins);
    }
    for segment in trace.chunks(window) {
        bins.extend(scan(segment, config)?);
    }
    Ok(bins)
}

/// Turns bins into numbered plans, drawing one uniform leaf per bin from the
/// plan stream in bin order.
pub fn assign_paths(
    bins: Vec<Bin>,
    stream: &mut LeafStream,
    first_sequence: u64,
) -> Vec<SuperblockPlan> {
    bins.into_iter()
        .enumerate()
        .map(|(i, bin)| SuperblockPlan {
            sequence: first_sequence + i as u64,
            members: bin.members,
            multiplicities: bin.multiplicities,
            leaf: stream.next_leaf(),
        })
        .collect()
}

/// Producer half of the two-stage pipeline: scans the trace window by window
/// and pushes finished plans into the bounded FIFO. Blocks while the channel
/// is full. A receiver that hangs up early is a clean shutdown, not an error;
/// the channel closing when this returns signals end-of-plans.
pub fn pipeline_feed(
    trace: &[BlockId],
    config: ScanConfig,
    stream: &mut LeafStream,
    sender: SyncSender<SuperblockPlan>,
) -> Result<u64> {
    config.validate()?;
    let window = config.window.unwrap_or(usize::MAX).max(1);
    let mut sequence = 0u64;
    for segment in trace.chunks(window) {
        for plan in assign_paths(scan(segment, config)?, stream, sequence) {
            sequence = plan.sequence + 1;
            if sender.send(plan).is_err() {
                return Ok(sequence - 1);
            }
        }
    }
    Ok(sequence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc::sync_channel;
    use std::time::Duration;

    fn cfg(s: usize) -> ScanConfig {
        ScanConfig {
            superblock_size: s,
            window: None,
        }
    }

    fn members(bins: &[Bin]) -> Vec<Vec<BlockId>> {
        bins.iter().map(|b| b.members.clone()).collect()
    }

    #[test]
    fn scan_bins_with_open_bin_dedup() {
        // 5 repeats only across bins here, so every multiplicity is 1.
        let bins = scan(&[5, 9, 5, 2], cfg(2)).unwrap();
        assert_eq!(members(&bins), vec![vec![5, 9], vec![5, 2]]);
        assert!(bins
            .iter()
            .all(|b| b.multiplicities.iter().all(|&m| m == 1)));
    }

    #[test]
    fn scan_collapses_consecutive_duplicates() {
        let bins = scan(&[7, 7, 7], cfg(2)).unwrap();
        assert_eq!(
            bins,
            vec![Bin {
                members: vec![7],
                multiplicities: vec![3]
            }]
        );
    }

    #[test]
    fn scan_counts_collapsed_entries_per_member() {
        // 5 collapses twice while the bin is open; 9 once; 2 closes it.
        let bins = scan(&[5, 9, 5, 9, 5, 2, 4], cfg(3)).unwrap();
        assert_eq!(
            bins,
            vec![
                Bin {
                    members: vec![5, 9, 2],
                    multiplicities: vec![3, 2, 1]
                },
                Bin {
                    members: vec![4],
                    multiplicities: vec![1]
                },
            ]
        );
    }

    #[test]
    fn scan_emits_short_final_bin() {
        let bins = scan(&[1, 2, 3, 4, 5], cfg(2)).unwrap();
        assert_eq!(members(&bins), vec![vec![1, 2], vec![3, 4], vec![5]]);
    }

    #[test]
    fn scan_superblock_one_is_one_bin_per_entry() {
        // A width-1 bin closes the moment it opens, so even consecutive
        // repeats each get their own bin: every request keeps costing one
        // fetch, exactly like the classic engine.
        let bins = scan(&[3, 3, 1, 3], cfg(1)).unwrap();
        assert_eq!(members(&bins), vec![vec![3], vec![3], vec![1], vec![3]]);
        assert!(bins.iter().all(|b| b.multiplicities == vec![1]));
    }

    #[test]
    fn scan_empty_trace() {
        assert!(scan(&[], cfg(4)).unwrap().is_empty());
        assert!(scan(
            &[1],
            ScanConfig {
                superblock_size: 0,
                window: None
            }
        )
        .is_err());
    }

    #[test]
    fn windows_restart_bins_at_boundaries() {
        let trace = [1, 2, 3, 4, 5, 6, 7];
        let bins = scan_windows(
            &trace,
            ScanConfig {
                superblock_size: 4,
                window: Some(3),
            },
        )
        .unwrap();
        assert_eq!(members(&bins), vec![vec![1, 2, 3], vec![4, 5, 6], vec![7]]);
    }

    #[test]
    fn window_boundary_limits_dedup_scope() {
        // The second 1 lands in a new window, so it is not collapsed.
        let trace = [1, 1, 1, 1];
        let bins = scan_windows(
            &trace,
            ScanConfig {
                superblock_size: 4,
                window: Some(2),
            },
        )
        .unwrap();
        assert_eq!(
            bins,
            vec![
                Bin {
                    members: vec![1],
                    multiplicities: vec![2]
                },
                Bin {
                    members: vec![1],
                    multiplicities: vec![2]
                },
            ]
        );
    }

    #[test]
    fn assign_paths_numbers_in_order() {
        let one = |id: BlockId| Bin {
            members: vec![id],
            multiplicities: vec![1],
        };
        let mut stream = LeafStream::new(0, 64);
        let plans = assign_paths(vec![one(1), one(2), one(3)], &mut stream, 5);
        assert_eq!(
            plans.iter().map(|p| p.sequence).collect::<Vec<_>>(),
            vec![5, 6, 7]
        );
        assert!(plans.iter().all(|p| p.leaf < 64));
        // Same seed, same leaves.
        let mut stream2 = LeafStream::new(0, 64);
        let plans2 = assign_paths(vec![one(1), one(2), one(3)], &mut stream2, 5);
        assert_eq!(plans, plans2);
    }

    #[test]
    fn pipeline_preserves_order_through_bounded_queue() {
        let trace: Vec<u64> = (0..97).collect();
        let config = ScanConfig {
            superblock_size: 4,
            window: Some(10),
        };
        let expected = {
            let mut stream = LeafStream::new(3, 128);
            assign_paths(scan_windows(&trace, config).unwrap(), &mut stream, 0)
        };

        let (tx, rx) = sync_channel(2);
        let producer = std::thread::spawn(move || {
            let mut stream = LeafStream::new(3, 128);
            pipeline_feed(&trace, config, &mut stream, tx)
        });
        // Slow consumer so the producer hits the capacity bound.
        let mut received = Vec::new();
        while let Ok(plan) = rx.recv() {
            std::thread::sleep(Duration::from_micros(50));
            received.push(plan);
        }
        producer.join().unwrap().unwrap();
        assert_eq!(received, expected);
    }

    #[test]
    fn pipeline_handles_consumer_hangup() {
        let trace: Vec<u64> = (0..50).collect();
        let config = ScanConfig {
            superblock_size: 2,
            window: None,
        };
        let (tx, rx) = sync_channel(1);
        let producer = std::thread::spawn(move || {
            let mut stream = LeafStream::new(1, 16);
            pipeline_feed(&trace, config, &mut stream, tx)
        });
        let first = rx.recv().unwrap();
        assert_eq!(first.sequence, 0);
        drop(rx);
        // Clean shutdown, no panic or error.
        producer.join().unwrap().unwrap();
    }

    #[test]
    fn pipeline_empty_trace_closes_immediately() {
        let (tx, rx) = sync_channel::<SuperblockPlan>(1);
        let mut stream = LeafStream::new(1, 16);
        let produced = pipeline_feed(
            &[],
            ScanConfig {
                superblock_size: 2,
                window: None,
            },
            &mut stream,
            tx,
        )
        .unwrap();
        assert_eq!(produced, 0);
        assert!(rx.recv().is_err());
    }
}
