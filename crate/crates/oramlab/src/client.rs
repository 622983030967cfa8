//! Client-side state: position map, stash, and the superblock plan queue.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::error::{OramError, Result};
use crate::tree::{Block, BlockId, LeafId};

/// Dense block-to-leaf map; one entry per block, always total.
#[derive(Debug, Clone)]
pub struct PositionMap {
    leaves: Vec<LeafId>,
    num_leaves: u64,
}

impl PositionMap {
    /// Builds the map from per-block assignments produced by the caller.
    pub fn new(leaves: Vec<LeafId>, num_leaves: u64) -> Result<Self> {
        for (id, &leaf) in leaves.iter().enumerate() {
            if leaf >= num_leaves {
                debug_assert!(id as u64 <= u64::MAX);
                return Err(OramError::LeafOutOfRange { leaf, num_leaves });
            }
        }
        Ok(Self { leaves, num_leaves })
    }

    pub fn len(&self) -> u64 {
        self.leaves.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn lookup(&self, id: BlockId) -> Result<LeafId> {
        self.leaves
            .get(id as usize)
            .copied()
            .ok_or(OramError::BlockOutOfRange {
                id,
                n_blocks: self.len(),
            })
    }

    pub fn update(&mut self, id: BlockId, leaf: LeafId) -> Result<()> {
        if leaf >= self.num_leaves {
            return Err(OramError::LeafOutOfRange {
                leaf,
                num_leaves: self.num_leaves,
            });
        }
        let n_blocks = self.len();
        match self.leaves.get_mut(id as usize) {
            Some(slot) => {
                *slot = leaf;
                Ok(())
            }
            None => Err(OramError::BlockOutOfRange { id, n_blocks }),
        }
    }
}

#[derive(Debug, Clone)]
struct StashEntry {
    block: Block,
    /// Set while the block was fetched as part of a superblock but its own
    /// request has not arrived yet. Pinned entries are held out of write-back
    /// so the later request is guaranteed a stash hit.
    pinned: bool,
}

/// Blocks awaiting placement, keyed by id. Ordered iteration keeps write-back
/// tie-breaking deterministic.
#[derive(Debug, Clone, Default)]
pub struct Stash {
    entries: BTreeMap<BlockId, StashEntry>,
    peak: usize,
}

impl Stash {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    /// High-water mark of occupancy over the stash's lifetime.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn is_pinned(&self, id: BlockId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.pinned)
    }

    pub fn insert(&mut self, block: Block) -> Result<()> {
        self.insert_inner(block, false)
    }

    pub fn insert_pinned(&mut self, block: Block) -> Result<()> {
        self.insert_inner(block, true)
    }

    fn insert_inner(&mut self, block: Block, pinned: bool) -> Result<()> {
        let id = block.id;
        if self.entries.contains_key(&id) {
            return Err(OramError::DuplicateStashBlock { id });
        }
        self.entries.insert(id, StashEntry { block, pinned });
        self.peak = self.peak.max(self.entries.len());
        Ok(())
    }

    pub fn pin(&mut self, id: BlockId) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.pinned = true;
        }
    }

    pub fn unpin(&mut self, id: BlockId) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.pinned = false;
        }
    }

    pub fn payload(&self, id: BlockId) -> Option<&[u8]> {
        self.entries.get(&id).map(|e| e.block.payload.as_slice())
    }

    pub fn payload_mut(&mut self, id: BlockId) -> Option<&mut Vec<u8>> {
        self.entries.get_mut(&id).map(|e| &mut e.block.payload)
    }

    pub fn remove(&mut self, id: BlockId) -> Option<Block> {
        self.entries.remove(&id).map(|e| e.block)
    }

    /// Ids of unpinned entries in ascending id order.
    pub fn placeable_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.entries
            .iter()
            .filter(|(_, e)| !e.pinned)
            .map(|(&id, _)| id)
    }

    /// All resident ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.entries.keys().copied()
    }
}

/// One look-ahead superblock: up to S distinct members that the preprocessor
/// binned together, plus the uniformly drawn leaf their shared fetch will use.
/// `multiplicities[i]` counts how many raw trace entries collapsed into
/// member `i` — the one fetch owes that many servings of the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperblockPlan {
    pub sequence: u64,
    pub members: Vec<BlockId>,
    pub multiplicities: Vec<u64>,
    pub leaf: LeafId,
}

/// Plans in production order with a per-block index of pending membership.
/// Consumption is strictly FIFO per member; consuming a plan that is not the
/// head pending plan of every one of its members is an error.
#[derive(Debug, Clone, Default)]
pub struct PlanQueue {
    plans: Vec<SuperblockPlan>,
    consumed: Vec<bool>,
    /// Pending plan indices per block, front = next to consume.
    by_block: HashMap<BlockId, VecDeque<usize>>,
    by_sequence: HashMap<u64, usize>,
    pending: usize,
}

impl PlanQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_plans(plans: Vec<SuperblockPlan>) -> Self {
        let mut queue = Self::new();
        for plan in plans {
            queue.push(plan);
        }
        queue
    }

    pub fn push(&mut self, plan: SuperblockPlan) {
        let index = self.plans.len();
        for &m in &plan.members {
            self.by_block.entry(m).or_default().push_back(index);
        }
        self.by_sequence.insert(plan.sequence, index);
        self.plans.push(plan);
        self.consumed.push(false);
        self.pending += 1;
    }

    /// Pending plans remaining.
    pub fn len(&self) -> usize {
        self.pending
    }

    pub fn is_empty(&self) -> bool {
        self.pending == 0
    }

    pub fn total_produced(&self) -> usize {
        self.plans.len()
    }

    /// Lowest-sequence pending plan containing `id`, without consuming it.
    pub fn next_plan_for(&self, id: BlockId) -> Option<&SuperblockPlan> {
        let index = *self.by_block.get(&id)?.front()?;
        debug_assert!(!self.consumed[index]);
        Some(&self.plans[index])
    }

    /// First plan (production order) in which each block appears, if any.
    /// Used for look-ahead initial placement.
    pub fn first_plan_leaf(&self, id: BlockId) -> Option<LeafId> {
        // by_block keeps full pending history at load time; the back of the
        // deque moves but the first recorded index is stable only before any
        // consumption, so resolve through the plans list instead.
        self.plans
            .iter()
            .find(|p| p.members.contains(&id))
            .map(|p| p.leaf)
    }

    /// Consumes the plan with `sequence`. It must be the head pending plan of
    /// every member.
    pub fn consume(&mut self, sequence: u64) -> Result<SuperblockPlan> {
        let index = *self
            .by_sequence
            .get(&sequence)
            .ok_or(OramError::PlanMissing { id: sequence })?;
        if self.consumed[index] {
            return Err(OramError::PlanOutOfOrder {
                seq: sequence,
                id: self.plans[index].members.first().copied().unwrap_or(0),
            });
        }
        let members = self.plans[index].members.clone();
        for &m in &members {
            let head = self.by_block.get(&m).and_then(|q| q.front().copied());
            if head != Some(index) {
                return Err(OramError::PlanOutOfOrder {
                    seq: sequence,
                    id: m,
                });
            }
        }
        for &m in &members {
            let queue = self.by_block.get_mut(&m).expect("checked above");
            queue.pop_front();
            if queue.is_empty() {
                self.by_block.remove(&m);
            }
        }
        self.consumed[index] = true;
        self.pending -= 1;
        Ok(self.plans[index].clone())
    }

    pub fn plans(&self) -> &[SuperblockPlan] {
        &self.plans
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_map_lookup_update() {
        let mut pm = PositionMap::new(vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(pm.lookup(2).unwrap(), 2);
        pm.update(2, 0).unwrap();
        assert_eq!(pm.lookup(2).unwrap(), 0);
        assert!(matches!(
            pm.lookup(4),
            Err(OramError::BlockOutOfRange { .. })
        ));
        assert!(matches!(
            pm.update(0, 4),
            Err(OramError::LeafOutOfRange { .. })
        ));
        assert!(PositionMap::new(vec![4], 4).is_err());
    }

    #[test]
    fn stash_tracks_peak_monotonically() {
        let mut stash = Stash::new();
        let mk = |id: u64| Block {
            id,
            payload: vec![],
        };
        stash.insert(mk(1)).unwrap();
        stash.insert(mk(2)).unwrap();
        assert_eq!(stash.peak(), 2);
        stash.remove(1);
        assert_eq!(stash.occupancy(), 1);
        assert_eq!(stash.peak(), 2);
        stash.insert(mk(3)).unwrap();
        assert_eq!(stash.peak(), 2);
        stash.insert(mk(4)).unwrap();
        assert_eq!(stash.peak(), 3);
    }

    #[test]
    fn stash_rejects_duplicates() {
        let mut stash = Stash::new();
        stash
            .insert(Block {
                id: 7,
                payload: vec![],
            })
            .unwrap();
        assert!(matches!(
            stash.insert(Block {
                id: 7,
                payload: vec![]
            }),
            Err(OramError::DuplicateStashBlock { id: 7 })
        ));
    }

    #[test]
    fn stash_pinning_excludes_from_placeable() {
        let mut stash = Stash::new();
        stash
            .insert_pinned(Block {
                id: 1,
                payload: vec![],
            })
            .unwrap();
        stash
            .insert(Block {
                id: 2,
                payload: vec![],
            })
            .unwrap();
        assert_eq!(stash.placeable_ids().collect::<Vec<_>>(), vec![2]);
        stash.unpin(1);
        assert_eq!(stash.placeable_ids().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn plan_queue_fifo_per_member() {
        let mut q = PlanQueue::from_plans(vec![
            SuperblockPlan {
                sequence: 0,
                members: vec![5, 9],
                multiplicities: vec![1, 1],
                leaf: 3,
            },
            SuperblockPlan {
                sequence: 1,
                members: vec![5, 2],
                multiplicities: vec![1, 1],
                leaf: 1,
            },
        ]);
        assert_eq!(q.len(), 2);
        assert_eq!(q.next_plan_for(5).unwrap().sequence, 0);
        assert_eq!(q.next_plan_for(2).unwrap().sequence, 1);
        assert!(q.next_plan_for(99).is_none());

        // Consuming plan 1 first violates member 5's FIFO order.
        assert!(matches!(
            q.consume(1),
            Err(OramError::PlanOutOfOrder { .. })
        ));

        let p0 = q.consume(0).unwrap();
        assert_eq!(p0.members, vec![5, 9]);
        assert_eq!(q.len(), 1);
        assert_eq!(q.next_plan_for(5).unwrap().sequence, 1);
        assert!(q.next_plan_for(9).is_none());

        q.consume(1).unwrap();
        assert!(q.is_empty());
        assert!(matches!(
            q.consume(1),
            Err(OramError::PlanOutOfOrder { .. })
        ));
    }

    #[test]
    fn plan_queue_first_leaf() {
        let q = PlanQueue::from_plans(vec![
            SuperblockPlan {
                sequence: 0,
                members: vec![5, 9],
                multiplicities: vec![1, 1],
                leaf: 3,
            },
            SuperblockPlan {
                sequence: 1,
                members: vec![5, 2],
                multiplicities: vec![1, 1],
                leaf: 1,
            },
        ]);
        assert_eq!(q.first_plan_leaf(5), Some(3));
        assert_eq!(q.first_plan_leaf(2), Some(1));
        assert_eq!(q.first_plan_leaf(4), None);
    }
}
