//! PathORAM comparison baseline.
//!
//! Non-recursive: the position map is a plain vector scanned in full on
//! every access. The stash has a fixed number of slots and every stash and
//! eviction step is a full linear scan with [`o_select`], so within the
//! trusted region the only input-dependent quantity is the accessed leaf,
//! which is uniformly random.
//!
//! Trace granularity: one event per position-map entry, per tree bucket and
//! per stash/working slot.

use std::cell::RefCell;

use rand::Rng;

use crate::aggregation::{AggregationInput, DenseAggregate};
use crate::error::{Error, Result};
use crate::primitives::{ct_eq_u32, o_select, o_select_u32, CtWord};
use crate::trace::{AccessEvent, Region, TraceSink, TracedArray};

const DUMMY_ADDR: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OramConfig {
    /// Blocks per bucket (`Z`).
    pub bucket_size: usize,
    /// Stash slots kept between accesses.
    pub stash_size: usize,
}

impl Default for OramConfig {
    fn default() -> Self {
        OramConfig { bucket_size: 4, stash_size: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OramOp {
    Read,
    /// Adds the delta's float value to the stored payload.
    WriteAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    addr: u32,
    leaf: u32,
    payload: CtWord,
}

impl Block {
    const DUMMY: Block = Block { addr: DUMMY_ADDR, leaf: 0, payload: CtWord(0) };

    #[inline(always)]
    fn is_dummy(&self) -> bool {
        self.addr == DUMMY_ADDR
    }

    #[inline(always)]
    fn select(cond: bool, a: Block, b: Block) -> Block {
        Block {
            addr: o_select_u32(cond, a.addr, b.addr),
            leaf: o_select_u32(cond, a.leaf, b.leaf),
            payload: o_select(cond, a.payload, b.payload),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathOram {
    height: u32,
    capacity: usize,
    config: OramConfig,
    /// Heap-ordered buckets, `bucket_size` consecutive slots each.
    tree: Vec<Block>,
    stash: Vec<Block>,
    position_map: Vec<u32>,
    /// Stash plus one path worth of slots, reused across accesses.
    work: Vec<Block>,
    overflows: u64,
    last_leaf: u32,
}

/// Smallest `L` with `2^L >= capacity`.
fn tree_height(capacity: usize) -> u32 {
    capacity.next_power_of_two().trailing_zeros()
}

impl PathOram {
    /// `capacity` zero-valued blocks with uniformly random leaves.
    pub fn new<R: Rng + ?Sized>(capacity: usize, config: OramConfig, rng: &mut R) -> Result<Self> {
        if capacity == 0 || capacity >= DUMMY_ADDR as usize {
            return Err(Error::InvalidParameter(format!("ORAM capacity {capacity} unsupported")));
        }
        if config.bucket_size == 0 {
            return Err(Error::InvalidParameter("bucket size must be positive".into()));
        }
        let height = tree_height(capacity);
        let z = config.bucket_size;
        let buckets = (1usize << (height + 1)) - 1;
        let mut oram = PathOram {
            height,
            capacity,
            config,
            tree: vec![Block::DUMMY; buckets * z],
            stash: vec![Block::DUMMY; config.stash_size],
            position_map: vec![0; capacity],
            work: Vec::with_capacity(config.stash_size + (height as usize + 1) * z),
            overflows: 0,
            last_leaf: 0,
        };
        // Initial placement concerns public all-zero contents only.
        for addr in 0..capacity as u32 {
            let leaf = oram.random_leaf(rng);
            oram.position_map[addr as usize] = leaf;
            let block = Block { addr, leaf, payload: CtWord::from_f32(0.0) };
            let placed = oram.path_buckets(leaf).rev().any(|b| {
                let slots = &mut oram.tree[b * z..(b + 1) * z];
                match slots.iter_mut().find(|s| s.is_dummy()) {
                    Some(s) => {
                        *s = block;
                        true
                    }
                    None => false,
                }
            });
            if !placed {
                match oram.stash.iter_mut().find(|s| s.is_dummy()) {
                    Some(s) => *s = block,
                    None => {
                        oram.overflows += 1;
                        oram.stash.push(block);
                    }
                }
            }
        }
        Ok(oram)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.height
    }

    pub fn bucket_count(&self) -> usize {
        self.tree.len() / self.config.bucket_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn config(&self) -> OramConfig {
        self.config
    }

    /// Number of accesses (and initial placements) that left more blocks
    /// than stash slots.
    pub fn overflow_count(&self) -> u64 {
        self.overflows
    }

    /// Leaf whose path the most recent access read.
    pub fn last_leaf(&self) -> u32 {
        self.last_leaf
    }

    fn random_leaf<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.gen_range(0..self.leaf_count() as u32)
    }

    /// Bucket indices from the root down to `leaf`.
    fn path_buckets(&self, leaf: u32) -> impl DoubleEndedIterator<Item = usize> {
        let leaf_bucket = (1usize << self.height) - 1 + leaf as usize;
        let height = self.height;
        (0..=height).map(move |level| ((leaf_bucket + 1) >> (height - level)) - 1)
    }

    /// One PathORAM access. Returns the payload before the access.
    pub fn access<R: Rng + ?Sized, S: TraceSink>(
        &mut self,
        op: OramOp,
        addr: u32,
        delta: CtWord,
        rng: &mut R,
        sink: &mut S,
    ) -> Result<CtWord> {
        if addr as usize >= self.capacity {
            return Err(Error::OramAddress { addr, capacity: self.capacity });
        }
        let z = self.config.bucket_size;
        let new_leaf = self.random_leaf(rng);

        // Position map: full scan, remap target.
        let mut leaf = 0u32;
        for (i, entry) in self.position_map.iter_mut().enumerate() {
            sink.record(AccessEvent::read(Region::ORAM_POSMAP, i as u64));
            let hit = ct_eq_u32(i as u32, addr);
            leaf = o_select_u32(hit, *entry, leaf);
            *entry = o_select_u32(hit, new_leaf, *entry);
            sink.record(AccessEvent::write(Region::ORAM_POSMAP, i as u64));
        }
        self.last_leaf = leaf;

        // Read path into the working area behind the stash.
        let path: Vec<usize> = self.path_buckets(leaf).collect();
        self.work.clear();
        self.work.extend_from_slice(&self.stash);
        for &b in &path {
            sink.record(AccessEvent::read(Region::ORAM_TREE, b as u64));
            self.work.extend_from_slice(&self.tree[b * z..(b + 1) * z]);
        }

        // Locate and update the target.
        let add = op == OramOp::WriteAdd;
        let mut result = CtWord(0);
        for (i, block) in self.work.iter_mut().enumerate() {
            sink.record(AccessEvent::read(Region::ORAM_STASH, i as u64));
            let hit = ct_eq_u32(block.addr, addr);
            result = o_select(hit, block.payload, result);
            let updated = CtWord::from_f32(block.payload.value() + delta.value());
            block.payload = o_select(hit & add, updated, block.payload);
            block.leaf = o_select_u32(hit, new_leaf, block.leaf);
            sink.record(AccessEvent::write(Region::ORAM_STASH, i as u64));
        }

        // Greedy eviction from the leaf upwards; each slot takes the first
        // working block whose leaf shares this bucket.
        for (level, &b) in path.iter().enumerate().rev() {
            let shift = self.height - level as u32;
            let prefix = leaf >> shift;
            for s in 0..z {
                let mut chosen = Block::DUMMY;
                let mut taken = false;
                for (i, block) in self.work.iter_mut().enumerate() {
                    sink.record(AccessEvent::read(Region::ORAM_STASH, i as u64));
                    let fits = !block.is_dummy() & ct_eq_u32(block.leaf >> shift, prefix);
                    let take = fits & !taken;
                    chosen = Block::select(take, *block, chosen);
                    block.addr = o_select_u32(take, DUMMY_ADDR, block.addr);
                    taken |= take;
                    sink.record(AccessEvent::write(Region::ORAM_STASH, i as u64));
                }
                self.tree[b * z + s] = chosen;
            }
            sink.record(AccessEvent::write(Region::ORAM_TREE, b as u64));
        }

        // Compact leftovers back into the stash.
        let leftover = self.work.iter().filter(|b| !b.is_dummy()).count();
        let slots = self.config.stash_size.max(leftover);
        self.stash.clear();
        for _ in 0..slots {
            let mut chosen = Block::DUMMY;
            let mut taken = false;
            for block in self.work.iter_mut() {
                let take = !block.is_dummy() & !taken;
                chosen = Block::select(take, *block, chosen);
                block.addr = o_select_u32(take, DUMMY_ADDR, block.addr);
                taken |= take;
            }
            self.stash.push(chosen);
        }
        if leftover > self.config.stash_size {
            self.overflows += 1;
            return Err(Error::StashOverflow { occupancy: leftover, capacity: self.config.stash_size });
        }
        Ok(result)
    }

    pub fn read<R: Rng + ?Sized, S: TraceSink>(&mut self, addr: u32, rng: &mut R, sink: &mut S) -> Result<f32> {
        Ok(self.access(OramOp::Read, addr, CtWord(0), rng, sink)?.value())
    }

    pub fn write_add<R: Rng + ?Sized, S: TraceSink>(
        &mut self,
        addr: u32,
        delta: f32,
        rng: &mut R,
        sink: &mut S,
    ) -> Result<()> {
        self.access(OramOp::WriteAdd, addr, CtWord::from_f32(delta), rng, sink).map(|_| ())
    }

    /// Checks the path invariant: every real block lies on the path to its
    /// mapped leaf or in the stash. Test support.
    pub fn check_invariants(&self) -> bool {
        let z = self.config.bucket_size;
        let mut found = vec![0usize; self.capacity];
        for (slot, block) in self.tree.iter().enumerate() {
            if block.is_dummy() {
                continue;
            }
            let bucket = slot / z;
            let leaf = self.position_map[block.addr as usize];
            if block.leaf != leaf || !self.path_buckets(leaf).any(|b| b == bucket) {
                return false;
            }
            found[block.addr as usize] += 1;
        }
        for block in self.stash.iter().filter(|b| !b.is_dummy()) {
            if block.leaf != self.position_map[block.addr as usize] {
                return false;
            }
            found[block.addr as usize] += 1;
        }
        found.iter().all(|&c| c == 1) && self.position_map.iter().all(|&l| (l as usize) < self.leaf_count())
    }
}

/// Aggregation through a `d`-block ORAM: one `write_add` per input cell,
/// then `d` reads. Dummy cells add 0 to block 0.
pub fn oram_aggregate<R: Rng + ?Sized, S: TraceSink>(
    input: &AggregationInput,
    config: OramConfig,
    rng: &mut R,
    sink: &RefCell<S>,
) -> Result<DenseAggregate> {
    let d = input.d();
    let mut oram = PathOram::new(d, config, rng)?;
    let g = TracedArray::new(Region::GRADIENTS, input.cells().to_vec(), sink);
    for q in 0..g.len() {
        let cell = g.read(q);
        let dummy = cell.is_sentinel();
        let addr = o_select_u32(dummy, 0, cell.index());
        let delta = o_select(dummy, CtWord::from_f32(0.0), CtWord::from_f32(cell.value()));
        oram.access(OramOp::WriteAdd, addr, delta, rng, &mut *sink.borrow_mut())?;
    }
    let mut out = TracedArray::new(Region::AGGREGATE, vec![0.0f32; d], sink);
    for j in 0..d {
        let v = oram.read(j as u32, rng, &mut *sink.borrow_mut())?;
        out.write(j, v);
    }
    Ok(DenseAggregate { values: out.into_inner() })
}
