//! Server-side tree storage.
//!
//! A complete binary tree of buckets, heap-numbered from 1 at the root so
//! node `i` has children `2i` and `2i+1`. Leaves occupy nodes
//! `num_leaves..2*num_leaves-1` and are addressed externally by a 0-based
//! [`LeafId`]. Every bucket is materialized at its full width; empty slots
//! hold dummies so a path transfer always moves the same number of slots.
//!
//! Bucket width may vary by level ([`BucketSchedule`]): a uniform schedule is
//! classic Path ORAM, a "fat" schedule widens buckets toward the root, which
//! buys write-back headroom for superblock workloads at the cost of larger
//! path transfers.

use std::io::{Read, Write};

use crate::error::{OramError, Result};

pub type BlockId = u64;
pub type LeafId = u64;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"LAOR";
pub const SNAPSHOT_VERSION: u32 = 1;

/// An addressed fixed-size opaque payload, the unit of ORAM storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub payload: Vec<u8>,
}

/// Per-level bucket widths, root first. Widths never grow toward the leaves:
/// uniform schedules are constant and fat schedules shrink root-to-leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSchedule {
    sizes: Vec<usize>,
}

impl BucketSchedule {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(OramError::InvalidSchedule("no levels".into()));
        }
        if sizes.contains(&0) {
            return Err(OramError::InvalidSchedule("zero-width bucket".into()));
        }
        if sizes.windows(2).any(|w| w[1] > w[0]) {
            return Err(OramError::InvalidSchedule(
                "bucket widths must be non-increasing from root to leaf".into(),
            ));
        }
        Ok(Self { sizes })
    }

    /// Constant width `z` across `levels` levels.
    pub fn uniform(z: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(OramError::InvalidSchedule("no levels".into()));
        }
        Self::new(vec![z; levels])
    }

    /// Linear interpolation from `root` width down to `leaf` width. Endpoint
    /// widths are exact; interior levels round half away from zero and are
    /// clamped so the schedule stays non-increasing.
    pub fn linear(root: usize, leaf: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(OramError::InvalidSchedule("no levels".into()));
        }
        if root < leaf {
            return Err(OramError::InvalidSchedule(format!(
                "linear schedule must not grow toward leaves (root {root} < leaf {leaf})"
            )));
        }
        if levels == 1 {
            return Self::new(vec![root]);
        }
        let span = (root - leaf) as f64;
        let steps = (levels - 1) as f64;
        let mut sizes = Vec::with_capacity(levels);
        let mut prev = root;
        for level in 0..levels {
            let interpolated = root as f64 - span * level as f64 / steps;
            let width = (interpolated.round() as usize).min(prev).max(leaf);
            sizes.push(width);
            prev = width;
        }
        *sizes.last_mut().unwrap() = leaf;
        Self::new(sizes)
    }

    /// One width for all internal levels and another for the leaf level.
    pub fn step(internal: usize, leaf: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(OramError::InvalidSchedule("no levels".into()));
        }
        if levels == 1 {
            return Self::new(vec![leaf]);
        }
        let mut sizes = vec![internal; levels - 1];
        sizes.push(leaf);
        Self::new(sizes)
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn size_at(&self, level: usize) -> usize {
        self.sizes[level]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Slots moved by one path transfer in one direction.
    pub fn per_path_slots(&self) -> u64 {
        self.sizes.iter().map(|&z| z as u64).sum()
    }

    pub fn is_uniform(&self) -> bool {
        self.sizes.windows(2).all(|w| w[0] == w[1])
    }
}

/// Shape of one tree: height, bucket schedule, and payload width.
/// `height` is the leaf level index, so the tree has `height + 1` levels and
/// `2^height` leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeGeometry {
    height: usize,
    block_size: usize,
    schedule: BucketSchedule,
}

impl TreeGeometry {
    pub const MAX_HEIGHT: usize = 40;

    pub fn new(height: usize, block_size: usize, schedule: BucketSchedule) -> Result<Self> {
        if height > Self::MAX_HEIGHT {
            return Err(OramError::InvalidParameter(format!(
                "height {height} exceeds maximum {}",
                Self::MAX_HEIGHT
            )));
        }
        if block_size == 0 {
            return Err(OramError::InvalidParameter(
                "block_size must be positive".into(),
            ));
        }
        if schedule.levels() != height + 1 {
            return Err(OramError::InvalidSchedule(format!(
                "schedule has {} levels, tree of height {height} needs {}",
                schedule.levels(),
                height + 1
            )));
        }
        Ok(Self {
            height,
            block_size,
            schedule,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn schedule(&self) -> &BucketSchedule {
        &self.schedule
    }

    pub fn num_leaves(&self) -> u64 {
        1u64 << self.height
    }

    pub fn node_count(&self) -> usize {
        (1usize << (self.height + 1)) - 1
    }

    pub fn check_leaf(&self, leaf: LeafId) -> Result<()> {
        if leaf < self.num_leaves() {
            Ok(())
        } else {
            Err(OramError::LeafOutOfRange {
                leaf,
                num_leaves: self.num_leaves(),
            })
        }
    }

    /// Heap node ids along the root-to-leaf path, root first. The last entry
    /// is the leaf node `num_leaves + leaf`.
    pub fn path_nodes(&self, leaf: LeafId) -> Result<Vec<usize>> {
        self.check_leaf(leaf)?;
        let mut node = (self.num_leaves() + leaf) as usize;
        let mut nodes = vec![0usize; self.height + 1];
        for level in (0..=self.height).rev() {
            nodes[level] = node;
            node /= 2;
        }
        Ok(nodes)
    }

    /// Deepest level at which the paths to `a` and `b` coincide. Equal leaves
    /// share the whole path, so the result is `height`.
    pub fn common_prefix_level(&self, a: LeafId, b: LeafId) -> Result<usize> {
        self.check_leaf(a)?;
        self.check_leaf(b)?;
        let diff = a ^ b;
        let diverge_bits = 64 - diff.leading_zeros() as usize;
        Ok(self.height - diverge_bits)
    }

    /// Bytes held by the bucket tree: `sum over levels of 2^level * width * block_size`.
    pub fn storage_bytes(&self) -> u64 {
        let mut total: u128 = 0;
        for (level, &z) in self.schedule.sizes().iter().enumerate() {
            total += (1u128 << level) * z as u128 * self.block_size as u128;
        }
        u64::try_from(total).expect("storage size exceeds u64")
    }
}

/// One bucket: a fixed number of slots, each holding a real block or a dummy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    slots: Vec<Option<Block>>,
}

impl Bucket {
    pub fn empty(capacity: usize) -> Self {
        Self {
            slots: vec![None; capacity],
        }
    }

    /// Dummy-pads `blocks` up to `capacity`; rejects overflow.
    pub fn from_blocks(blocks: Vec<Block>, capacity: usize, level: usize) -> Result<Self> {
        if blocks.len() > capacity {
            return Err(OramError::BucketOverflow {
                level,
                count: blocks.len(),
                capacity,
            });
        }
        let mut slots: Vec<Option<Block>> = blocks.into_iter().map(Some).collect();
        slots.resize(capacity, None);
        Ok(Self { slots })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn real_blocks(&self) -> impl Iterator<Item = &Block> {
        self.slots.iter().flatten()
    }

    pub fn real_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn slots(&self) -> &[Option<Block>] {
        &self.slots
    }

    pub fn take_real_blocks(&mut self) -> Vec<Block> {
        self.slots.iter_mut().filter_map(Option::take).collect()
    }

    /// Places `block` in the first free slot; hands it back if the bucket is
    /// full.
    pub fn push_real(&mut self, block: Block) -> std::result::Result<(), Block> {
        match self.slots.iter_mut().find(|s| s.is_none()) {
            Some(slot) => {
                *slot = Some(block);
                Ok(())
            }
            None => Err(block),
        }
    }
}

/// The in-memory bucket tree plus its transfer accounting. Reads and writes
/// happen a whole path at a time; each direction moves every slot on the
/// path, dummies included, which is what the transfer counter records.
#[derive(Debug, Clone)]
pub struct TreeStore {
    geometry: TreeGeometry,
    /// Heap-ordered buckets; index `node - 1`.
    nodes: Vec<Bucket>,
    slots_transferred: u64,
}

impl TreeStore {
    pub fn new(geometry: TreeGeometry) -> Self {
        let mut nodes = Vec::with_capacity(geometry.node_count());
        for node in 1..=geometry.node_count() {
            let level = level_of_node(node);
            nodes.push(Bucket::empty(geometry.schedule().size_at(level)));
        }
        Self {
            geometry,
            nodes,
            slots_transferred: 0,
        }
    }

    pub fn geometry(&self) -> &TreeGeometry {
        &self.geometry
    }

    pub fn slots_transferred(&self) -> u64 {
        self.slots_transferred
    }

    pub fn bucket(&self, node: usize) -> &Bucket {
        &self.nodes[node - 1]
    }

    /// Direct bucket access for bulk initialization, which is out-of-band and
    /// does not count as path traffic.
    pub(crate) fn bucket_mut(&mut self, node: usize) -> &mut Bucket {
        &mut self.nodes[node - 1]
    }

    /// Buckets along the path root..leaf. Counts one outbound transfer of
    /// every slot on the path.
    pub fn read_path(&mut self, leaf: LeafId) -> Result<Vec<Bucket>> {
        let nodes = self.geometry.path_nodes(leaf)?;
        self.slots_transferred += self.geometry.schedule().per_path_slots();
        Ok(nodes.iter().map(|&n| self.nodes[n - 1].clone()).collect())
    }

    /// Replaces the path root..leaf with `buckets`. Counts one inbound
    /// transfer, symmetric to `read_path`.
    pub fn write_path(&mut self, leaf: LeafId, buckets: Vec<Bucket>) -> Result<()> {
        let nodes = self.geometry.path_nodes(leaf)?;
        if buckets.len() != nodes.len() {
            return Err(OramError::PathLengthMismatch {
                got: buckets.len(),
                want: nodes.len(),
                height: self.geometry.height(),
            });
        }
        for (level, bucket) in buckets.iter().enumerate() {
            let capacity = self.geometry.schedule().size_at(level);
            if bucket.capacity() != capacity {
                return Err(OramError::BucketOverflow {
                    level,
                    count: bucket.capacity(),
                    capacity,
                });
            }
            for block in bucket.real_blocks() {
                if block.payload.len() != self.geometry.block_size() {
                    return Err(OramError::InvalidParameter(format!(
                        "block {} payload is {} bytes, store expects {}",
                        block.id,
                        block.payload.len(),
                        self.geometry.block_size()
                    )));
                }
            }
        }
        for (node, bucket) in nodes.into_iter().zip(buckets) {
            self.nodes[node - 1] = bucket;
        }
        self.slots_transferred += self.geometry.schedule().per_path_slots();
        Ok(())
    }

    /// Total real blocks resident in the tree. Inspection only; not part of
    /// the access protocol.
    pub fn resident_blocks(&self) -> usize {
        self.nodes.iter().map(Bucket::real_count).sum()
    }

    /// Serializes the complete store: little-endian header (magic, version,
    /// height, block size, per-level widths) followed by every bucket in
    /// level order, each slot as a presence flag, block id, and payload.
    /// Dummies serialize as flag 0 with a zero id and zero payload, so equal
    /// stores produce byte-identical snapshots.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.geometry.height() as u32).to_le_bytes())?;
        w.write_all(&(self.geometry.block_size() as u32).to_le_bytes())?;
        for &z in self.geometry.schedule().sizes() {
            w.write_all(&(z as u32).to_le_bytes())?;
        }
        let zero_payload = vec![0u8; self.geometry.block_size()];
        for bucket in &self.nodes {
            for slot in bucket.slots() {
                match slot {
                    Some(block) => {
                        w.write_all(&[1u8])?;
                        w.write_all(&block.id.to_le_bytes())?;
                        w.write_all(&block.payload)?;
                    }
                    None => {
                        w.write_all(&[0u8])?;
                        w.write_all(&0u64.to_le_bytes())?;
                        w.write_all(&zero_payload)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf)
            .expect("in-memory snapshot write cannot fail");
        buf
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<TreeStore> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(OramError::SnapshotFormat(format!("bad magic {magic:02x?}")));
        }
        let version = read_u32(r)?;
        if version != SNAPSHOT_VERSION {
            return Err(OramError::SnapshotFormat(format!(
                "unsupported version {version}"
            )));
        }
        let height = read_u32(r)? as usize;
        let block_size = read_u32(r)? as usize;
        if height > TreeGeometry::MAX_HEIGHT {
            return Err(OramError::SnapshotFormat(format!(
                "height {height} out of range"
            )));
        }
        let mut sizes = Vec::with_capacity(height + 1);
        for _ in 0..=height {
            sizes.push(read_u32(r)? as usize);
        }
        let schedule =
            BucketSchedule::new(sizes).map_err(|e| OramError::SnapshotFormat(e.to_string()))?;
        let geometry = TreeGeometry::new(height, block_size, schedule)
            .map_err(|e| OramError::SnapshotFormat(e.to_string()))?;
        let mut store = TreeStore::new(geometry);
        for node in 1..=store.geometry.node_count() {
            let capacity = store.nodes[node - 1].capacity();
            let mut slots = Vec::with_capacity(capacity);
            for _ in 0..capacity {
                let mut flag = [0u8; 1];
                r.read_exact(&mut flag)?;
                let id = read_u64(r)?;
                let mut payload = vec![0u8; block_size];
                r.read_exact(&mut payload)?;
                match flag[0] {
                    0 => slots.push(None),
                    1 => slots.push(Some(Block { id, payload })),
                    other => {
                        return Err(OramError::SnapshotFormat(format!(
                            "slot flag {other} at node {node}"
                        )))
                    }
                }
            }
            store.nodes[node - 1] = Bucket { slots };
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(OramError::SnapshotFormat(
                "trailing bytes after last bucket".into(),
            ));
        }
        Ok(store)
    }
}

/// Level of a 1-based heap node: floor(log2(node)).
pub fn level_of_node(node: usize) -> usize {
    debug_assert!(node >= 1);
    (usize::BITS - 1 - node.leading_zeros()) as usize
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
