//! Server-side aggregation of top-k sparsified client gradients.
//!
//! All aggregators take the concatenation `g = g_1 || ... || g_n` of `n`
//! client gradients of `k` cells each and produce the dense `d`-length sum.
//! They differ only in what their memory access pattern reveals:
//!
//! * [`linear_aggregate`] scatters each cell into `G*[index]` and leaks every
//!   client's index set.
//! * [`baseline_aggregate`] sweeps all of `G*` (one cacheline slot per
//!   bucket) for every cell; oblivious at cacheline granularity.
//! * [`advanced_aggregate`] sorts, folds and sorts again; oblivious at cell
//!   granularity in `O(m log^2 m)` for `m = next_pow2(nk + d)`.
//! * [`grouped_advanced_aggregate`] runs the advanced algorithm on groups of
//!   `h` clients and accumulates densely.
//!
//! Indices are 0-based. A cell with index [`SENTINEL_INDEX`] and value 0 is a
//! dummy: it pads clients with fewer than `k` nonzero coordinates and is
//! ignored by every aggregator.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::oram::{oram_aggregate, OramConfig};
use crate::osort::{bitonic_sort, SortKeyOrder};
use crate::primitives::{ct_eq_u32, o_select, o_select_f32, o_select_u32, o_select_u64, CtWord, SENTINEL_INDEX};
use crate::trace::{Region, TraceSink, TracedArray};

pub const BATCH_MAGIC: &[u8; 4] = b"OLV1";
pub const BATCH_VERSION: u32 = 1;

/// One client's top-k update: distinct indices below `model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    entries: Vec<(u32, f32)>,
    model_dim: usize,
}

impl SparseGradient {
    pub fn new(entries: Vec<(u32, f32)>, model_dim: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(index, _) in &entries {
            if index as usize >= model_dim {
                return Err(Error::IndexOutOfRange { index, dim: model_dim });
            }
            if !seen.insert(index) {
                return Err(Error::Shape(format!("duplicate index {index} within one client")));
            }
        }
        if entries.len() > model_dim {
            return Err(Error::Shape(format!("k = {} exceeds d = {model_dim}", entries.len())));
        }
        Ok(SparseGradient { entries, model_dim })
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub(crate) fn map_values(self, f: impl Fn(f32) -> f32) -> Self {
        SparseGradient {
            entries: self.entries.into_iter().map(|(i, v)| (i, f(v))).collect(),
            model_dim: self.model_dim,
        }
    }

    /// The client's `k` cells, sentinel-padded if it has fewer entries.
    pub fn to_cells(&self, k: usize) -> Result<Vec<CtWord>> {
        if self.entries.len() > k {
            return Err(Error::Shape(format!("client has {} entries, more than k = {k}", self.entries.len())));
        }
        let mut cells: Vec<CtWord> = self.entries.iter().map(|&(i, v)| CtWord::pack(i, v)).collect();
        cells.resize(k, CtWord::SENTINEL);
        Ok(cells)
    }
}

/// `n` clients of `k` cells each, concatenated in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationInput {
    cells: Vec<CtWord>,
    n: usize,
    k: usize,
    d: usize,
}

impl AggregationInput {
    pub fn new(cells: Vec<CtWord>, n: usize, k: usize, d: usize) -> Result<Self> {
        if cells.len() != n * k {
            return Err(Error::Shape(format!("{} cells for n = {n}, k = {k}", cells.len())));
        }
        if d == 0 || d >= SENTINEL_INDEX as usize {
            return Err(Error::Shape(format!("model dimension {d} unsupported")));
        }
        for c in &cells {
            if c.is_sentinel() {
                if c.value() != 0.0 {
                    return Err(Error::Shape("dummy cell carries a nonzero value".into()));
                }
            } else if c.index() as usize >= d {
                return Err(Error::IndexOutOfRange { index: c.index(), dim: d });
            }
        }
        Ok(AggregationInput { cells, n, k, d })
    }

    /// Concatenates client gradients, padding each to `k` cells.
    pub fn from_gradients(grads: &[SparseGradient], k: usize, d: usize) -> Result<Self> {
        let mut cells = Vec::with_capacity(grads.len() * k);
        for g in grads {
            if g.model_dim() != d {
                return Err(Error::Shape(format!("client dimension {} != {d}", g.model_dim())));
            }
            cells.extend(g.to_cells(k)?);
        }
        Self::new(cells, grads.len(), k, d)
    }

    pub fn cells(&self) -> &[CtWord] {
        &self.cells
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn client(&self, i: usize) -> &[CtWord] {
        &self.cells[i * self.k..(i + 1) * self.k]
    }

    /// Batch file: magic, version, n, k, d, then `n*k` (u32 index, f32
    /// value) records, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        for x in [BATCH_VERSION, self.n as u32, self.k as u32, self.d as u32] {
            w.write_all(&x.to_le_bytes())?;
        }
        for c in &self.cells {
            w.write_all(&c.index().to_le_bytes())?;
            w.write_all(&c.value().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header).map_err(|_| Error::Format("truncated batch header".into()))?;
        if &header[..4] != BATCH_MAGIC {
            return Err(Error::Format("bad batch magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != BATCH_VERSION {
            return Err(Error::Format(format!("unsupported batch version {}", word(4))));
        }
        let (n, k, d) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let mut body = vec![0u8; n * k * 8];
        r.read_exact(&mut body).map_err(|_| Error::Format("truncated batch body".into()))?;
        let cells = body
            .chunks_exact(8)
            .map(|rec| {
                let index = u32::from_le_bytes(rec[..4].try_into().unwrap());
                let value = f32::from_le_bytes(rec[4..].try_into().unwrap());
                CtWord::pack(index, value)
            })
            .collect();
        Self::new(cells, n, k, d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `k = ceil(alpha * d)`, at least 1.
pub fn sparse_k(alpha: f64, d: usize) -> usize {
    ((alpha * d as f64).ceil() as usize).clamp(1, d)
}

/// Synthetic batch: per client `k` distinct indices drawn uniformly without
/// replacement, values uniform in [-1, 1].
pub fn random_input<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize, d: usize) -> Result<AggregationInput> {
    if k > d {
        return Err(Error::Shape(format!("k = {k} exceeds d = {d}")));
    }
    let mut cells = Vec::with_capacity(n * k);
    for _ in 0..n {
        for idx in sample(rng, d, k) {
            cells.push(CtWord::pack(idx as u32, rng.gen_range(-1.0f32..=1.0)));
        }
    }
    AggregationInput::new(cells, n, k, d)
}

/// Dense `d`-length aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAggregate {
    pub values: Vec<f32>,
}

impl DenseAggregate {
    pub fn zeros(d: usize) -> Self {
        DenseAggregate { values: vec![0.0; d] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Plain scatter-add: for every real cell, `G*[index] += value`.
///
/// Traced as read `G[q]`, read `G*[index]`, write `G*[index]` per real
/// cell; dummy cells only produce the `G` read.
pub fn linear_aggregate<S: TraceSink>(input: &AggregationInput, sink: &RefCell<S>) -> Result<DenseAggregate> {
    let g = TracedArray::new(Region::GRADIENTS, input.cells.clone(), sink);
    let mut out = TracedArray::new(Region::AGGREGATE, vec![0.0f32; input.d], sink);
    for q in 0..g.len() {
        let (index, value) = g.read(q).unpack();
        if index == SENTINEL_INDEX {
            continue;
        }
        let j = index as usize;
        let acc = out.read(j);
        out.write(j, acc + value);
    }
    Ok(DenseAggregate { values: out.into_inner() })
}

/// Dummy-sweep aggregation at cacheline granularity `c`.
///
/// For a cell with index `i`, every `G*` slot congruent to `i mod c` is
/// written once with `o_select(slot == i, old + value, old)`. `G*` is padded
/// internally to a multiple of `c` so every offset touches the same number
/// of buckets. Summation order per index equals [`linear_aggregate`]'s, so
/// the results are bitwise identical.
pub fn baseline_aggregate<S: TraceSink>(
    input: &AggregationInput,
    cacheline_c: usize,
    sink: &RefCell<S>,
) -> Result<DenseAggregate> {
    if cacheline_c == 0 {
        return Err(Error::InvalidParameter("cacheline granularity must be positive".into()));
    }
    let c = cacheline_c;
    let buckets = input.d.div_ceil(c);
    let g = TracedArray::new(Region::GRADIENTS, input.cells.clone(), sink);
    let mut out = TracedArray::new(Region::AGGREGATE, vec![0.0f32; buckets * c], sink);
    for q in 0..g.len() {
        let (index, value) = g.read(q).unpack();
        let offset = index as usize % c;
        let mut sweep = out.lease();
        for b in 0..buckets {
            let slot = b * c + offset;
            let hit = ct_eq_u32(slot as u32, index);
            sweep.update(slot, |old| o_select_f32(hit, old + value, old));
        }
    }
    let mut values = out.into_inner();
    values.truncate(input.d);
    Ok(DenseAggregate { values })
}

/// Sort-and-fold aggregation.
pub fn advanced_aggregate<S: TraceSink>(input: &AggregationInput, sink: &RefCell<S>) -> Result<DenseAggregate> {
    let g = TracedArray::new(Region::GRADIENTS, input.cells.clone(), sink);
    let out = advanced_range(&g, 0..input.cells.len(), input.d, Region::AGGREGATE, sink)?;
    Ok(DenseAggregate { values: out.into_inner() })
}

/// Grouped sort-and-fold: clients are split in arrival order into groups of
/// `h` (the last may be smaller); each group is aggregated by the advanced
/// algorithm and added into a dense accumulator by a full index-order sweep.
/// With a single group the trace equals [`advanced_aggregate`]'s.
pub fn grouped_advanced_aggregate<S: TraceSink>(
    input: &AggregationInput,
    group_size_h: usize,
    sink: &RefCell<S>,
) -> Result<DenseAggregate> {
    if group_size_h == 0 {
        return Err(Error::ZeroGroupSize);
    }
    let (n, k, d) = (input.n, input.k, input.d);
    let g = TracedArray::new(Region::GRADIENTS, input.cells.clone(), sink);
    let group_range = |first: usize| first * k..(first + group_size_h).min(n) * k;
    let first = advanced_range(&g, group_range(0), d, Region::AGGREGATE, sink)?;
    // Accumulator cells are widened to f64; the access pattern is unchanged.
    let mut acc = TracedArray::new(Region::AGGREGATE, first.into_inner().into_iter().map(f64::from).collect(), sink);
    for first in (group_size_h..n).step_by(group_size_h) {
        let part = advanced_range(&g, group_range(first), d, Region::GROUP_OUT, sink)?;
        for j in 0..d {
            let add = part.read(j);
            let cur = acc.read(j);
            acc.write(j, cur + f64::from(add));
        }
    }
    Ok(DenseAggregate { values: acc.into_inner().into_iter().map(|v| v as f32).collect() })
}

/// Advanced aggregation of `g[range]`, returning the traced `G*` region.
fn advanced_range<'s, S: TraceSink>(
    g: &TracedArray<'s, CtWord, S>,
    range: std::ops::Range<usize>,
    d: usize,
    out_region: Region,
    sink: &'s RefCell<S>,
) -> Result<TracedArray<'s, f32, S>> {
    let work = sort_and_fold(g, range, d, sink)?;
    let mut out = TracedArray::new(out_region, vec![0.0f32; d], sink);
    for j in 0..d {
        let cell = work.read(j);
        out.write(j, cell.value());
    }
    Ok(out)
}

/// Steps 1-5 of the advanced algorithm: append one zero cell per index,
/// pad with sentinels to a power of two, sort, fold, sort. Afterwards the
/// first `d` cells hold indices `0..d` once each and the rest are sentinels.
pub(crate) fn sort_and_fold<'s, S: TraceSink>(
    g: &TracedArray<'s, CtWord, S>,
    range: std::ops::Range<usize>,
    d: usize,
    sink: &'s RefCell<S>,
) -> Result<TracedArray<'s, CtWord, S>> {
    let len = range.len();
    let m = (len + d).next_power_of_two();
    let mut work = TracedArray::new(Region::WORK, vec![CtWord::SENTINEL; m], sink);
    for (p, q) in range.enumerate() {
        let cell = g.read(q);
        work.write(p, cell);
    }
    {
        let mut w = work.lease();
        for j in 0..d {
            w.write(len + j, CtWord::pack(j as u32, 0.0));
        }
        for p in len + d..m {
            w.write(p, CtWord::SENTINEL);
        }
    }
    bitonic_sort(&mut work, SortKeyOrder::ByIndex)?;
    oblivious_fold(&mut work);
    bitonic_sort(&mut work, SortKeyOrder::ByIndex)?;
    Ok(work)
}

/// One pass over an index-sorted array: the last cell of every run of equal
/// indices receives the run's sum, every other cell becomes a sentinel. The
/// access pattern is read `p`, write `p - 1` for each position, then a write
/// of the final position.
fn oblivious_fold<S: TraceSink>(work: &mut TracedArray<'_, CtWord, S>) {
    let m = work.len();
    let mut w = work.lease();
    // The run's sum is carried in an f64 register and rounded once on output.
    let first = w.read(0);
    let mut index = first.index();
    let mut sum = f64::from(first.value());
    for p in 1..m {
        let cur = w.read(p);
        let same = ct_eq_u32(cur.index(), index);
        w.write(p - 1, o_select(same, CtWord::SENTINEL, CtWord::pack(index, sum as f32)));
        let merged = (sum + f64::from(cur.value())).to_bits();
        sum = f64::from_bits(o_select_u64(same, merged, f64::from(cur.value()).to_bits()));
        index = o_select_u32(same, index, cur.index());
    }
    w.write(m - 1, CtWord::pack(index, sum as f32));
}

/// `out[j] = (agg[j] + z_j) / n_expected` with `z_j ~ N(0, noise_std^2)`.
///
/// Two full sweeps of `G*`: noise, then scaling. One normal draw per
/// coordinate regardless of `noise_std`, so the RNG stream advances by the
/// same amount on every call.
pub fn average_and_perturb<R: Rng + ?Sized, S: TraceSink>(
    agg: DenseAggregate,
    n_expected: f64,
    noise_std: f64,
    rng: &mut R,
    sink: &RefCell<S>,
) -> Result<DenseAggregate> {
    if !(n_expected > 0.0) {
        return Err(Error::InvalidParameter(format!("expected participant count must be positive, got {n_expected}")));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidParameter(format!("noise std must be non-negative, got {noise_std}")));
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = TracedArray::new(Region::AGGREGATE, agg.values, sink);
    let mut sweep = out.lease();
    for j in 0..sweep.len() {
        let z: f64 = normal.sample(rng);
        sweep.update(j, |v| (v as f64 + z) as f32);
    }
    for j in 0..sweep.len() {
        sweep.update(j, |v| (v as f64 / n_expected) as f32);
    }
    drop(sweep);
    Ok(DenseAggregate { values: out.into_inner() })
}

/// Aggregator selection shared by the simulator, the CLI and the C ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Linear,
    Baseline { cacheline_c: usize },
    Advanced,
    Grouped { h: usize },
    Oram { bucket_size: usize, stash_size: usize },
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Linear => "linear",
            Aggregator::Baseline { .. } => "baseline",
            Aggregator::Advanced => "advanced",
            Aggregator::Grouped { .. } => "grouped",
            Aggregator::Oram { .. } => "oram",
        }
    }

    /// Whether the aggregator's trace is input-independent (at the
    /// granularity returned by [`Aggregator::oblivious_granularity`]).
    pub fn is_oblivious(&self) -> bool {
        !matches!(self, Aggregator::Linear)
    }

    pub fn oblivious_granularity(&self) -> u64 {
        match self {
            Aggregator::Baseline { cacheline_c } => *cacheline_c as u64,
            _ => 1,
        }
    }

    pub fn run<R: Rng + ?Sized, S: TraceSink>(
        &self,
        input: &AggregationInput,
        rng: &mut R,
        sink: &RefCell<S>,
    ) -> Result<DenseAggregate> {
        match *self {
            Aggregator::Linear => linear_aggregate(input, sink),
            Aggregator::Baseline { cacheline_c } => baseline_aggregate(input, cacheline_c, sink),
            Aggregator::Advanced => advanced_aggregate(input, sink),
            Aggregator::Grouped { h } => grouped_advanced_aggregate(input, h, sink),
            Aggregator::Oram { bucket_size, stash_size } => {
                oram_aggregate(input, OramConfig { bucket_size, stash_size }, rng, sink)
            }
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Baseline { cacheline_c } => write!(f, "baseline(c={cacheline_c})"),
            Aggregator::Grouped { h } => write!(f, "grouped(h={h})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `linear`, `baseline`, `advanced`, `grouped`, `oram`, optionally
/// with a parameter: `baseline:16`, `grouped:100`, `oram:4`.
impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let num = |default: Option<usize>| -> Result<usize> {
            match param {
                Some(p) => p.trim().parse().map_err(|_| Error::InvalidParameter(format!("bad aggregator parameter `{p}`"))),
                None => default.ok_or_else(|| Error::InvalidParameter(format!("aggregator `{name}` needs a parameter"))),
            }
        };
        let default_oram = OramConfig::default();
        Ok(match name.trim() {
            "linear" => Aggregator::Linear,
            "baseline" => Aggregator::Baseline { cacheline_c: num(Some(1))? },
            "advanced" => Aggregator::Advanced,
            "grouped" => Aggregator::Grouped { h: num(None)? },
            "oram" => Aggregator::Oram { bucket_size: num(Some(default_oram.bucket_size))?, stash_size: default_oram.stash_size },
            other => return Err(Error::InvalidParameter(format!("unknown aggregator `{other}`"))),
        })
    }
}
