use std::collections::{HashMap, HashSet};

use crate::client::{PlanQueue, PositionMap, Stash, SuperblockPlan};
use crate::error::{OramError, Result};
use crate::metrics::Counters;
use crate::rng::LeafStream;
use crate::tree::{Block, BlockId, Bucket, LeafId, TreeGeometry, TreeStore};

/// Stash occupancy above which background eviction starts draining.
pub const DEFAULT_HIGH_WATERMARK: usize = 500;
/// Occupancy a drain episode runs down to once triggered.
pub const DEFAULT_LOW_WATERMARK: usize = 50;
/// A drain episode may issue at most `MAX_DRAIN_FACTOR * height` dummy reads
/// before it is declared stalled.
pub const MAX_DRAIN_FACTOR: u64 = 64;

/// Hysteresis control for background eviction: exceed `high_watermark` after
/// an access and dummy reads are issued until occupancy falls to
/// `low_watermark`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionPolicy {
    pub enabled: bool,
    pub high_watermark: usize,
    pub low_watermark: usize,
}

impl EvictionPolicy {
    pub fn new(enabled: bool, high_watermark: usize, low_watermark: usize) -> Result<Self> {
        let policy = Self {
            enabled,
            high_watermark,
            low_watermark,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.high_watermark <= self.low_watermark {
            return Err(OramError::InvalidWatermarks {
                high: self.high_watermark,
                low: self.low_watermark,
            });
        }
        Ok(())
    }
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            high_watermark: DEFAULT_HIGH_WATERMARK,
            low_watermark: DEFAULT_LOW_WATERMARK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessOp {
    Read,
    Write(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchKind {
    Real,
    Dummy,
}

/// One path transfer as the storage side observes it: which leaf, at which
/// request step, and whether a real request or background noise caused it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafFetch {
    pub step: u64,
    pub leaf: LeafId,
    pub kind: FetchKind,
}

/// Where fetch targets and remapped positions come from: a plain uniform
/// stream, or the superblock plan queue with a uniform fallback for blocks
/// that have no pending plan.
enum PathSource {
    Uniform(LeafStream),
    Planned {
        queue: PlanQueue,
        fallback: LeafStream,
        superblock_size: usize,
    },
}

pub struct EngineParams {
    pub geometry: TreeGeometry,
    pub n_blocks: u64,
    pub policy: EvictionPolicy,
    /// Issue one background dummy read whenever a request is served straight
    /// from the stash without a real path fetch.
    pub stash_hit_dummy_read: bool,
    pub init_seed: u64,
    pub evict_seed: u64,
}

/// One ORAM client plus its storage tree. `access` serves a single request;
/// `process` additionally applies the eviction policy afterwards.
pub struct Engine {
    store: TreeStore,
    positions: PositionMap,
    stash: Stash,
    source: PathSource,
    evict_stream: LeafStream,
    policy: EvictionPolicy,
    stash_hit_dummy_read: bool,
    remap_enabled: bool,
    /// Servings still owed per block by its consumed plan: a member stays
    /// pinned in the stash until the raw trace entries that collapsed into it
    /// have all been served. A block is a key here iff it is pinned.
    debts: HashMap<BlockId, u64>,
    counters: Counters,
    leaf_log: Vec<LeafFetch>,
    step: u64,
    n_blocks: u64,
}

impl Engine {
    /// Classic engine: every access reads the requested block's own path and
    /// remaps it to the next draw of `assignment_seed`'s uniform stream.
    pub fn new_pathoram(params: EngineParams, assignment_seed: u64) -> Result<Self> {
        let num_leaves = params.geometry.num_leaves();
        let source = PathSource::Uniform(LeafStream::new(assignment_seed, num_leaves));
        Self::build(params, source, HashMap::new())
    }

    /// Look-ahead engine: accesses are served against `plans` in production
    /// order. One path fetch per plan serves every member; members remap to
    /// their next pending plan's leaf, or to `fallback_seed`'s stream when no
    /// plan is pending.
    pub fn new_lookahead(
        params: EngineParams,
        plans: Vec<SuperblockPlan>,
        superblock_size: usize,
        fallback_seed: u64,
    ) -> Result<Self> {
        if superblock_size == 0 {
            return Err(OramError::InvalidParameter(
                "superblock size must be positive".into(),
            ));
        }
        let mut last_sequence = None;
        for plan in &plans {
            if plan.members.is_empty() {
                return Err(OramError::InvalidParameter(format!(
                    "plan {} has no members",
                    plan.sequence
                )));
            }
            if plan.members.len() > superblock_size {
                return Err(OramError::InvalidParameter(format!(
                    "plan {} has {} members, superblock size is {superblock_size}",
                    plan.sequence,
                    plan.members.len()
                )));
            }
            if plan.multiplicities.len() != plan.members.len() {
                return Err(OramError::InvalidParameter(format!(
                    "plan {} has {} members but {} multiplicities",
                    plan.sequence,
                    plan.members.len(),
                    plan.multiplicities.len()
                )));
            }
            if plan.multiplicities.contains(&0) {
                return Err(OramError::InvalidParameter(format!(
                    "plan {} has a zero multiplicity",
                    plan.sequence
                )));
            }
            let mut seen = HashSet::with_capacity(plan.members.len());
            for &m in &plan.members {
                if m >= params.n_blocks {
                    return Err(OramError::BlockOutOfRange {
                        id: m,
                        n_blocks: params.n_blocks,
                    });
                }
                if !seen.insert(m) {
                    return Err(OramError::InvalidParameter(format!(
                        "plan {} lists block {m} twice",
                        plan.sequence
                    )));
                }
            }
            params.geometry.check_leaf(plan.leaf)?;
            if last_sequence.is_some_and(|prev| plan.sequence <= prev) {
                return Err(OramError::InvalidParameter(format!(
                    "plan sequences must increase, {} follows {}",
                    plan.sequence,
                    last_sequence.unwrap()
                )));
            }
            last_sequence = Some(plan.sequence);
        }

        // With real look-ahead (S >= 2) a block starts out already positioned
        // on the leaf of its first plan, so the plan's single fetch is
        // guaranteed to collect every member. The per-plan leaves are uniform
        // draws, so the initial placement distribution is unchanged. At S == 1
        // the plan leaf is purely the next remap target and initial positions
        // stay on the init stream.
        let mut overrides = HashMap::new();
        if superblock_size >= 2 {
            for plan in &plans {
                for &m in &plan.members {
                    overrides.entry(m).or_insert(plan.leaf);
                }
            }
        }

        let num_leaves = params.geometry.num_leaves();
        let source = PathSource::Planned {
            queue: PlanQueue::from_plans(plans),
            fallback: LeafStream::new(fallback_seed, num_leaves),
            superblock_size,
        };
        Self::build(params, source, overrides)
    }

    fn build(
        params: EngineParams,
        source: PathSource,
        overrides: HashMap<BlockId, LeafId>,
    ) -> Result<Self> {
        let EngineParams {
            geometry,
            n_blocks,
            policy,
            stash_hit_dummy_read,
            init_seed,
            evict_seed,
        } = params;
        policy.validate()?;
        if n_blocks == 0 {
            return Err(OramError::InvalidParameter(
                "store needs at least one block".into(),
            ));
        }
        let num_leaves = geometry.num_leaves();
        if n_blocks > num_leaves {
            return Err(OramError::InvalidParameter(format!(
                "{n_blocks} blocks exceed the tree's {num_leaves} leaves"
            )));
        }
        let block_size = geometry.block_size();

        // Every block draws an initial position from the init stream in id
        // order (keeping the stream aligned across configurations), then
        // plan-aware positions override their draws.
        let mut init_stream = LeafStream::new(init_seed, num_leaves);
        let mut leaves: Vec<LeafId> = (0..n_blocks).map(|_| init_stream.next_leaf()).collect();
        for (&id, &leaf) in &overrides {
            leaves[id as usize] = leaf;
        }
        let positions = PositionMap::new(leaves.clone(), num_leaves)?;

        // Bulk placement, deepest free slot first along each block's own
        // path. This is out-of-band setup, not path traffic.
        let mut store = TreeStore::new(geometry);
        let mut stash = Stash::new();
        for id in 0..n_blocks {
            let path = store.geometry().path_nodes(leaves[id as usize])?;
            let mut pending = Some(Block {
                id,
                payload: vec![0u8; block_size],
            });
            for &node in path.iter().rev() {
                let block = pending.take().expect("block still unplaced");
                if let Err(back) = store.bucket_mut(node).push_real(block) {
                    pending = Some(back);
                } else {
                    break;
                }
            }
            if let Some(block) = pending {
                stash.insert(block)?;
            }
        }

        Ok(Self {
            evict_stream: LeafStream::new(evict_seed, num_leaves),
            store,
            positions,
            stash,
            source,
            policy,
            stash_hit_dummy_read,
            remap_enabled: true,
            debts: HashMap::new(),
            counters: Counters::default(),
            leaf_log: Vec::new(),
            step: 0,
            n_blocks,
        })
    }

    pub fn n_blocks(&self) -> u64 {
        self.n_blocks
    }

    pub fn geometry(&self) -> &TreeGeometry {
        self.store.geometry()
    }

    pub fn store(&self) -> &TreeStore {
        &self.store
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn leaf_log(&self) -> &[LeafFetch] {
        &self.leaf_log
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stash_occupancy(&self) -> usize {
        self.stash.occupancy()
    }

    /// High-water mark including mid-access transients, unlike the counter
    /// peak which samples after each served request.
    pub fn stash_transient_peak(&self) -> usize {
        self.stash.peak()
    }

    pub fn position_of(&self, id: BlockId) -> Result<LeafId> {
        self.positions.lookup(id)
    }

    pub fn pending_plans(&self) -> usize {
        match &self.source {
            PathSource::Uniform(_) => 0,
            PathSource::Planned { queue, .. } => queue.len(),
        }
    }

    /// Disabling remap freezes the position map. Fetch targets then repeat,
    /// which is exactly the leakage the remap step exists to prevent; the
    /// uniformity checks use this as their negative control.
    pub fn set_remap_enabled(&mut self, enabled: bool) {
        self.remap_enabled = enabled;
    }

    /// Serve one request. The caller applies the eviction policy separately,
    /// or uses `process` to do both.
    pub fn access(&mut self, id: BlockId, op: AccessOp) -> Result<Vec<u8>> {
        if id >= self.n_blocks {
            return Err(OramError::BlockOutOfRange {
                id,
                n_blocks: self.n_blocks,
            });
        }
        if let AccessOp::Write(data) = &op {
            let want = self.store.geometry().block_size();
            if data.len() != want {
                return Err(OramError::InvalidParameter(format!(
                    "write of {} bytes to {want}-byte blocks",
                    data.len()
                )));
            }
        }
        self.step += 1;
        self.counters.real_accesses += 1;
        let planned = matches!(self.source, PathSource::Planned { .. });
        let value = if planned {
            self.lookahead_access(id, op)?
        } else {
            self.pathoram_access(id, op)?
        };
        self.counters.blocks_transferred = self.store.slots_transferred();
        let occupancy = self.stash.occupancy() as u64;
        self.counters.stash_peak = self.counters.stash_peak.max(occupancy);
        self.counters.stash_timeline.push((self.step, occupancy));
        Ok(value)
    }

    /// `access` followed by the eviction policy.
    pub fn process(&mut self, id: BlockId, op: AccessOp) -> Result<Vec<u8>> {
        let value = self.access(id, op)?;
        self.enforce_policy()?;
        Ok(value)
    }

    fn pathoram_access(&mut self, id: BlockId, op: AccessOp) -> Result<Vec<u8>> {
        // The path is read unconditionally, even when the block already sits
        // in the stash: skipping the read would let the storage side tell a
        // stash hit from a miss.
        let leaf = self.positions.lookup(id)?;
        self.fetch_path(leaf, FetchKind::Real)?;
        let value = self.serve(id, op)?;
        let new_leaf = match &mut self.source {
            PathSource::Uniform(stream) => stream.next_leaf(),
            PathSource::Planned { .. } => unreachable!("planned source in pathoram access"),
        };
        if self.remap_enabled {
            self.positions.update(id, new_leaf)?;
        }
        self.write_back(leaf)?;
        Ok(value)
    }

    fn lookahead_access(&mut self, id: BlockId, op: AccessOp) -> Result<Vec<u8>> {
        // A pinned entry was brought in by an earlier plan fetch that covers
        // exactly this request (and possibly more collapsed repeats); serving
        // it costs no path transfer. The pin drops once the fetch's debt for
        // this block is paid off.
        if let Some(debt) = self.debts.get_mut(&id) {
            debug_assert!(
                self.stash.is_pinned(id),
                "debt implies a pinned stash entry"
            );
            *debt -= 1;
            if *debt == 0 {
                self.debts.remove(&id);
                self.stash.unpin(id);
            }
            let value = self.serve(id, op)?;
            if self.stash_hit_dummy_read {
                self.background_evict()?;
            }
            return Ok(value);
        }

        let plan = match &self.source {
            PathSource::Planned { queue, .. } => queue.next_plan_for(id).cloned(),
            PathSource::Uniform(_) => unreachable!("uniform source in lookahead access"),
        };
        let Some(plan) = plan else {
            // Off-plan requests only appear when the caller runs past the
            // preprocessed trace. A stash-resident block can still be served
            // in place; anything else has no known fetch target.
            if self.stash.contains(id) {
                let value = self.serve(id, op)?;
                if self.stash_hit_dummy_read {
                    self.background_evict()?;
                }
                return Ok(value);
            }
            return Err(OramError::PlanMissing { id });
        };

        let superblock_size = match &self.source {
            PathSource::Planned {
                superblock_size, ..
            } => *superblock_size,
            PathSource::Uniform(_) => unreachable!(),
        };
        let fetch_leaf = if superblock_size == 1 {
            // Degenerate plans carry only the remap target; the fetch goes to
            // the block's current position exactly as in the classic engine.
            self.positions.lookup(id)?
        } else {
            for &member in &plan.members {
                let position = self.positions.lookup(member)?;
                if position != plan.leaf {
                    return Err(OramError::PlanPositionMismatch {
                        id: member,
                        position,
                        planned: plan.leaf,
                    });
                }
            }
            plan.leaf
        };

        self.fetch_path(fetch_leaf, FetchKind::Real)?;
        for (&member, &multiplicity) in plan.members.iter().zip(&plan.multiplicities) {
            if !self.stash.contains(member) {
                return Err(OramError::InvariantViolation(format!(
                    "plan {} member {member} missing after fetching leaf {fetch_leaf}",
                    plan.sequence
                )));
            }
            // This fetch owes each member one serving per collapsed trace
            // entry; the requester collects one right now.
            let owed = multiplicity - u64::from(member == id);
            if owed > 0 {
                self.stash.pin(member);
                self.debts.insert(member, owed);
            }
        }
        let value = self.serve(id, op)?;

        let remaps: Vec<(BlockId, LeafId)> = match &mut self.source {
            PathSource::Planned {
                queue,
                fallback,
                superblock_size,
            } => {
                queue.consume(plan.sequence)?;
                let single = *superblock_size == 1;
                plan.members
                    .iter()
                    .map(|&member| {
                        let leaf = if single {
                            plan.leaf
                        } else {
                            match queue.next_plan_for(member) {
                                Some(next) => next.leaf,
                                None => fallback.next_leaf(),
                            }
                        };
                        (member, leaf)
                    })
                    .collect()
            }
            PathSource::Uniform(_) => unreachable!(),
        };
        if self.remap_enabled {
            for (member, leaf) in remaps {
                self.positions.update(member, leaf)?;
            }
        }
        self.write_back(fetch_leaf)?;
        Ok(value)
    }

    fn serve(&mut self, id: BlockId, op: AccessOp) -> Result<Vec<u8>> {
        match op {
            AccessOp::Read => self.stash.payload(id).map(<[u8]>::to_vec).ok_or_else(|| {
                OramError::InvariantViolation(format!("block {id} absent from stash at service"))
            }),
            AccessOp::Write(data) => {
                let slot = self.stash.payload_mut(id).ok_or_else(|| {
                    OramError::InvariantViolation(format!(
                        "block {id} absent from stash at service"
                    ))
                })?;
                Ok(std::mem::replace(slot, data))
            }
        }
    }

    fn fetch_path(&mut self, leaf: LeafId, kind: FetchKind) -> Result<()> {
        match kind {
            FetchKind::Real => self.counters.real_path_reads += 1,
            FetchKind::Dummy => self.counters.dummy_reads += 1,
        }
        self.leaf_log.push(LeafFetch {
            step: self.step,
            leaf,
            kind,
        });
        for mut bucket in self.store.read_path(leaf)? {
            for block in bucket.take_real_blocks() {
                self.stash.insert(block)?;
            }
        }
        Ok(())
    }

    /// Greedy write-back along the just-read path: every stash block that is
    /// not pinned competes for the deepest slot its position allows, deepest
    /// candidates first, smaller ids first on ties.
    fn write_back(&mut self, leaf: LeafId) -> Result<()> {
        let (height, sizes) = {
            let geometry = self.store.geometry();
            (geometry.height(), geometry.schedule().sizes().to_vec())
        };

        // Group candidates by how deep their path agrees with the fetched
        // one; a block in group `d` fits any level up to `d`.
        let mut groups: Vec<Vec<BlockId>> = vec![Vec::new(); height + 1];
        {
            let geometry = self.store.geometry();
            let placeable: Vec<BlockId> = self.stash.placeable_ids().collect();
            for id in placeable {
                let position = self.positions.lookup(id)?;
                let depth = geometry.common_prefix_level(position, leaf)?;
                groups[depth].push(id);
            }
        }
        // Levels 0..=d hold at most sum(sizes[..=d]) blocks, so only that
        // many of a group's smallest ids can ever place; the rest cannot win
        // a slot under the id tie-break and are dropped up front.
        let mut reachable_slots = 0usize;
        for (depth, group) in groups.iter_mut().enumerate() {
            reachable_slots += sizes[depth];
            group.truncate(reachable_slots);
        }

        let mut cursors = vec![0usize; height + 1];
        let mut buckets: Vec<Bucket> = Vec::with_capacity(height + 1);
        for level in (0..=height).rev() {
            let mut blocks: Vec<Block> = Vec::with_capacity(sizes[level]);
            for depth in (level..=height).rev() {
                while blocks.len() < sizes[level] && cursors[depth] < groups[depth].len() {
                    let id = groups[depth][cursors[depth]];
                    cursors[depth] += 1;
                    let block = self
                        .stash
                        .remove(id)
                        .expect("placeable block is stash-resident");
                    blocks.push(block);
                }
            }
            buckets.push(Bucket::from_blocks(blocks, sizes[level], level)?);
        }
        buckets.reverse();
        self.store.write_path(leaf, buckets)?;
        self.counters.blocks_transferred = self.store.slots_transferred();
        Ok(())
    }

    /// One dummy read: fetch a uniform leaf from the evict stream and write
    /// the path straight back. No block is remapped, but the round trip gives
    /// stash blocks a chance to sink into the tree.
    pub fn background_evict(&mut self) -> Result<()> {
        let leaf = self.evict_stream.next_leaf();
        self.fetch_path(leaf, FetchKind::Dummy)?;
        self.write_back(leaf)
    }

    /// Drain the stash to the low watermark once it exceeds the high one.
    /// Returns the number of dummy reads issued; an episode that cannot get
    /// the occupancy down within `MAX_DRAIN_FACTOR * height` reads stalls.
    pub fn enforce_policy(&mut self) -> Result<u64> {
        if !self.policy.enabled || self.stash.occupancy() <= self.policy.high_watermark {
            return Ok(0);
        }
        let budget = MAX_DRAIN_FACTOR * self.store.geometry().height().max(1) as u64;
        let mut issued = 0u64;
        while self.stash.occupancy() > self.policy.low_watermark {
            if issued >= budget {
                return Err(OramError::EvictionStall {
                    issued,
                    occupancy: self.stash.occupancy(),
                });
            }
            self.background_evict()?;
            issued += 1;
        }
        Ok(issued)
    }

    /// Full-scan consistency check: every block id lives in exactly one place
    /// (a tree slot or the stash), tree residents sit on the path of their
    /// mapped position, and payload widths match the geometry.
    pub fn check_invariants(&self) -> Result<()> {
        let geometry = self.store.geometry();
        let block_size = geometry.block_size();
        let mut seen: HashSet<BlockId> = HashSet::with_capacity(self.n_blocks as usize);
        for node in 1..=geometry.node_count() {
            for block in self.store.bucket(node).real_blocks() {
                if block.id >= self.n_blocks {
                    return Err(OramError::InvariantViolation(format!(
                        "tree holds unknown block {}",
                        block.id
                    )));
                }
                if !seen.insert(block.id) {
                    return Err(OramError::InvariantViolation(format!(
                        "block {} stored more than once",
                        block.id
                    )));
                }
                if block.payload.len() != block_size {
                    return Err(OramError::InvariantViolation(format!(
                        "block {} payload is {} bytes, geometry says {block_size}",
                        block.id,
                        block.payload.len()
                    )));
                }
                let position = self.positions.lookup(block.id)?;
                if !geometry.path_nodes(position)?.contains(&node) {
                    return Err(OramError::InvariantViolation(format!(
                        "block {} at node {node} is off the path of its leaf {position}",
                        block.id
                    )));
                }
            }
        }
        for id in self.stash.ids() {
            if id >= self.n_blocks {
                return Err(OramError::InvariantViolation(format!(
                    "stash holds unknown block {id}"
                )));
            }
            if !seen.insert(id) {
                return Err(OramError::InvariantViolation(format!(
                    "block {id} is both tree-resident and stashed"
                )));
            }
        }
        for (&id, &debt) in &self.debts {
            if debt == 0 || !self.stash.is_pinned(id) {
                return Err(OramError::InvariantViolation(format!(
                    "block {id} owes {debt} servings but is not pinned in the stash"
                )));
            }
        }
        if seen.len() as u64 != self.n_blocks {
            return Err(OramError::InvariantViolation(format!(
                "{} of {} blocks accounted for",
                seen.len(),
                self.n_blocks
            )));
        }
        Ok(())
    }
}
