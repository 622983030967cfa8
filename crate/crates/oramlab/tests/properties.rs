use oramlab::engine::{AccessOp, Engine, EngineParams, EvictionPolicy};
use oramlab::preprocess::{assign_paths, scan, scan_windows, Bin, ScanConfig};
use oramlab::rng::LeafStream;
use oramlab::tree::{BlockId, BucketSchedule, TreeGeometry};
use proptest::prelude::*;

/// Reference binning written the slow, obvious way (linear member search,
/// explicit per-window restart) so the production scanner has something
/// independent to disagree with.
fn reference_bins(trace: &[BlockId], s: usize, window: Option<usize>) -> Vec<Bin> {
    let mut out = Vec::new();
    let window = window.unwrap_or(usize::MAX);
    for chunk in trace.chunks(window.max(1)) {
        let mut members: Vec<BlockId> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        for &id in chunk {
            if let Some(i) = members.iter().position(|&m| m == id) {
                counts[i] += 1;
            } else {
                members.push(id);
                counts.push(1);
                if members.len() == s {
                    out.push(Bin {
                        members: std::mem::take(&mut members),
                        multiplicities: std::mem::take(&mut counts),
                    });
                }
            }
        }
        if !members.is_empty() {
            out.push(Bin {
                members,
                multiplicities: counts,
            });
        }
    }
    out
}

fn trace_strategy() -> impl Strategy<Value = Vec<BlockId>> {
    prop::collection::vec(0u64..24, 0..400)
}

proptest! {
    #[test]
    fn scanner_matches_the_reference(
        trace in trace_strategy(),
        s in 1usize..=9,
        window in prop::option::of(1usize..=50),
    ) {
        let config = ScanConfig { superblock_size: s, window };
        let bins = scan_windows(&trace, config).unwrap();
        prop_assert_eq!(&bins, &reference_bins(&trace, s, window));
        if window.is_none() {
            prop_assert_eq!(&bins, &scan(&trace, config).unwrap());
        }

        let mut total = 0u64;
        for bin in &bins {
            prop_assert!(!bin.members.is_empty());
            prop_assert!(bin.members.len() <= s);
            prop_assert_eq!(bin.members.len(), bin.multiplicities.len());
            let mut seen = bin.members.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), bin.members.len(), "duplicate member in a bin");
            prop_assert!(bin.multiplicities.iter().all(|&m| m >= 1));
            total += bin.multiplicities.iter().sum::<u64>();
        }
        prop_assert_eq!(total, trace.len() as u64, "every trace entry lands in some bin");
    }

    #[test]
    fn plans_number_bins_and_draw_leaves_in_order(
        trace in trace_strategy(),
        s in 1usize..=9,
        first_sequence in 0u64..1000,
        plan_seed in 0u64..64,
    ) {
        let bins = scan(&trace, ScanConfig { superblock_size: s, window: None }).unwrap();
        let num_leaves = 64;
        let mut stream = LeafStream::new(plan_seed, num_leaves);
        let mut expect = LeafStream::new(plan_seed, num_leaves);
        let plans = assign_paths(bins.clone(), &mut stream, first_sequence);
        prop_assert_eq!(plans.len(), bins.len());
        for (i, (plan, bin)) in plans.iter().zip(&bins).enumerate() {
            prop_assert_eq!(plan.sequence, first_sequence + i as u64);
            prop_assert_eq!(&plan.members, &bin.members);
            prop_assert_eq!(&plan.multiplicities, &bin.multiplicities);
            prop_assert_eq!(plan.leaf, expect.next_leaf());
            prop_assert!(plan.leaf < num_leaves);
        }
    }
}

#[derive(Debug, Clone)]
enum Mode {
    Classic,
    LookAhead { superblock_size: usize },
}

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop_oneof![
        Just(Mode::Classic),
        (1usize..=8).prop_map(|superblock_size| Mode::LookAhead { superblock_size }),
    ]
}

proptest! {
    /// Both engines must behave exactly like a flat array of blocks, and the
    /// structural invariants must hold after every single request.
    #[test]
    fn engines_are_honest_rams(
        height in 3usize..=6,
        z in 1usize..=4,
        mode in mode_strategy(),
        seed_base in 0u64..256,
        steps in prop::collection::vec((any::<prop::sample::Index>(), prop::option::of(any::<u8>())), 1..200),
    ) {
        let n = 1u64 << height.min(5);
        let block_size = 8;
        let schedule = BucketSchedule::uniform(z, height + 1).unwrap();
        let geometry = TreeGeometry::new(height, block_size, schedule).unwrap();
        let trace: Vec<BlockId> =
            steps.iter().map(|(ix, _)| ix.index(n as usize) as u64).collect();
        let params = EngineParams {
            geometry: geometry.clone(),
            n_blocks: n,
            policy: EvictionPolicy::new(true, 500, 50).unwrap(),
            stash_hit_dummy_read: false,
            init_seed: seed_base,
            evict_seed: seed_base.wrapping_add(1),
        };
        let mut engine = match mode {
            Mode::Classic => Engine::new_pathoram(params, seed_base.wrapping_add(2)).unwrap(),
            Mode::LookAhead { superblock_size } => {
                let bins =
                    scan(&trace, ScanConfig { superblock_size, window: None }).unwrap();
                let mut stream =
                    LeafStream::new(seed_base.wrapping_add(2), geometry.num_leaves());
                let plans = assign_paths(bins, &mut stream, 0);
                Engine::new_lookahead(params, plans, superblock_size, seed_base.wrapping_add(3))
                    .unwrap()
            }
        };

        let mut oracle: Vec<Vec<u8>> = vec![vec![0u8; block_size]; n as usize];
        for (&id, (_, write)) in trace.iter().zip(&steps) {
            let op = match write {
                Some(byte) => AccessOp::Write(vec![*byte; block_size]),
                None => AccessOp::Read,
            };
            let got = engine.process(id, op).unwrap();
            prop_assert_eq!(&got, &oracle[id as usize], "block {} served stale data", id);
            if let Some(byte) = write {
                oracle[id as usize] = vec![*byte; block_size];
            }
            engine.check_invariants().unwrap();
        }
    }

    #[test]
    fn paths_share_exactly_their_common_prefix(
        height in 1usize..=8,
        z in 1usize..=5,
        seeds in prop::collection::vec(any::<prop::sample::Index>(), 2),
    ) {
        let schedule = BucketSchedule::uniform(z, height + 1).unwrap();
        let geometry = TreeGeometry::new(height, 8, schedule).unwrap();
        let leaves = geometry.num_leaves() as usize;
        let a = seeds[0].index(leaves) as u64;
        let b = seeds[1].index(leaves) as u64;
        let path_a = geometry.path_nodes(a).unwrap();
        let path_b = geometry.path_nodes(b).unwrap();
        prop_assert_eq!(path_a.len(), height + 1);
        prop_assert_eq!(path_a[0], 1, "paths start at the root");

        let shared = path_a.iter().zip(&path_b).take_while(|(x, y)| x == y).count();
        let level = geometry.common_prefix_level(a, b).unwrap();
        prop_assert_eq!(level + 1, shared);
        prop_assert_eq!(geometry.common_prefix_level(b, a).unwrap(), level);
        prop_assert_eq!(level == height, a == b);
        // Below the split the paths never touch again.
        prop_assert!(path_a[shared..].iter().all(|node| !path_b.contains(node)));
    }
}
