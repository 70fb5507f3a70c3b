//! Access-pattern tracing.
//!
//! A [`TracedArray`] wraps a vector and appends one [`AccessEvent`] to a
//! shared [`TraceSink`] for every element read or write made through its API.
//! Events carry the region, the cell and the operation but never the value:
//! the observer in the threat model sees addresses, not plaintext.
//!
//! Deterministic algorithms are fully oblivious iff their traces on any two
//! same-shape inputs are identical, which [`trace_equal`] checks. Randomised
//! ones (PathORAM) are compared by [`trace_statistical_distance`].

use std::cell::{RefCell, RefMut};
use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"OLVT";
pub const TRACE_VERSION: u32 = 1;

/// Identifier of a logical array in the traced memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region(pub u8);

impl Region {
    /// Concatenated client gradients `G`.
    pub const GRADIENTS: Region = Region(0);
    /// Dense aggregate `G*`.
    pub const AGGREGATE: Region = Region(1);
    /// Working buffer of the sort-and-fold aggregator.
    pub const WORK: Region = Region(2);
    /// Per-group output of the grouped aggregator.
    pub const GROUP_OUT: Region = Region(3);
    pub const ORAM_POSMAP: Region = Region(4);
    pub const ORAM_TREE: Region = Region(5);
    pub const ORAM_STASH: Region = Region(6);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Op {
    Read = 0,
    Write = 1,
}

impl Op {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Op::Read),
            1 => Ok(Op::Write),
            other => Err(Error::Format(format!("bad op byte {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AccessEvent {
    pub region: Region,
    pub cell: u64,
    pub op: Op,
}

impl AccessEvent {
    pub fn read(region: Region, cell: u64) -> Self {
        AccessEvent { region, cell, op: Op::Read }
    }

    pub fn write(region: Region, cell: u64) -> Self {
        AccessEvent { region, cell, op: Op::Write }
    }

    fn bucketed(self, granularity: u64) -> Self {
        AccessEvent { cell: self.cell / granularity, ..self }
    }

    const ENCODED_LEN: usize = 10;

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.region.0);
        out.push(self.op as u8);
        out.extend_from_slice(&self.cell.to_le_bytes());
    }
}

/// Destination for access events. One sink per algorithm execution.
pub trait TraceSink {
    fn record(&mut self, event: AccessEvent);
}

/// Discards everything. Used for timing runs.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl TraceSink for NullSink {
    #[inline(always)]
    fn record(&mut self, _event: AccessEvent) {}
}

/// Counts reads and writes without storing them.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CountingSink {
    pub reads: u64,
    pub writes: u64,
}

impl CountingSink {
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }
}

impl TraceSink for CountingSink {
    #[inline(always)]
    fn record(&mut self, event: AccessEvent) {
        match event.op {
            Op::Read => self.reads += 1,
            Op::Write => self.writes += 1,
        }
    }
}

/// Ordered list of access events.
///
/// `granularity` states how many raw cells one stored `cell` value stands
/// for; traces recorded by [`TracedArray`] have granularity 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTrace {
    pub events: Vec<AccessEvent>,
    pub granularity: u64,
}

impl Default for AccessTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl AccessTrace {
    pub fn new() -> Self {
        AccessTrace { events: Vec::new(), granularity: 1 }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Cacheline view: every cell replaced by `cell / c`.
    pub fn bucketed(&self, c: u64) -> AccessTrace {
        assert!(c > 0, "granularity must be positive");
        AccessTrace {
            events: self.events.iter().map(|e| e.bucketed(c)).collect(),
            granularity: self.granularity * c,
        }
    }

    /// Canonical byte string: the record stream without header.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.events.len() * AccessEvent::ENCODED_LEN);
        for e in &self.events {
            e.encode(&mut out);
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        write_trace_header(&mut w)?;
        w.write_all(&self.canonical_bytes())?;
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<AccessTrace> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated trace header".into()))?;
        if &header[..4] != TRACE_MAGIC {
            return Err(Error::Format("bad trace magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported trace version {version}")));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() % AccessEvent::ENCODED_LEN != 0 {
            return Err(Error::Format("truncated trace record".into()));
        }
        let events = body
            .chunks_exact(AccessEvent::ENCODED_LEN)
            .map(|rec| {
                Ok(AccessEvent {
                    region: Region(rec[0]),
                    op: Op::from_byte(rec[1])?,
                    cell: u64::from_le_bytes(rec[2..10].try_into().unwrap()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AccessTrace { events, granularity: 1 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AccessTrace> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl TraceSink for AccessTrace {
    #[inline]
    fn record(&mut self, event: AccessEvent) {
        self.events.push(event);
    }
}

fn write_trace_header<W: Write>(w: &mut W) -> io::Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())
}

/// Streams events straight to a writer in the dump format. For traces too
/// large to hold in memory.
pub struct FileSink<W: Write> {
    writer: W,
    granularity: u64,
    written: u64,
    error: Option<io::Error>,
    buf: Vec<u8>,
}

impl FileSink<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, granularity: u64) -> Result<Self> {
        Ok(FileSink::new(BufWriter::new(File::create(path)?), granularity)?)
    }
}

impl<W: Write> FileSink<W> {
    pub fn new(mut writer: W, granularity: u64) -> io::Result<Self> {
        assert!(granularity > 0, "granularity must be positive");
        write_trace_header(&mut writer)?;
        Ok(FileSink { writer, granularity, written: 0, error: None, buf: Vec::with_capacity(16) })
    }

    pub fn events_written(&self) -> u64 {
        self.written
    }

    /// Flushes and surfaces the first write error, if any.
    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<W: Write> TraceSink for FileSink<W> {
    fn record(&mut self, event: AccessEvent) {
        if self.error.is_some() {
            return;
        }
        self.buf.clear();
        event.bucketed(self.granularity).encode(&mut self.buf);
        match self.writer.write_all(&self.buf) {
            Ok(()) => self.written += 1,
            Err(e) => self.error = Some(e),
        }
    }
}

/// A vector whose element accesses are recorded in a shared sink.
pub struct TracedArray<'s, T, S> {
    region: Region,
    data: Vec<T>,
    sink: &'s RefCell<S>,
}

impl<'s, T: Copy, S: TraceSink> TracedArray<'s, T, S> {
    /// Wraps existing contents. Placing the initial contents is not traced.
    pub fn new(region: Region, data: Vec<T>, sink: &'s RefCell<S>) -> Self {
        TracedArray { region, data, sink }
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn read(&self, i: usize) -> T {
        let v = self.data[i];
        self.sink.borrow_mut().record(AccessEvent::read(self.region, i as u64));
        v
    }

    #[inline]
    pub fn write(&mut self, i: usize, v: T) {
        self.data[i] = v;
        self.sink.borrow_mut().record(AccessEvent::write(self.region, i as u64));
    }

    /// In-place read-modify-write of one cell, recorded as a single write.
    #[inline]
    pub fn update(&mut self, i: usize, f: impl FnOnce(T) -> T) {
        self.data[i] = f(self.data[i]);
        self.sink.borrow_mut().record(AccessEvent::write(self.region, i as u64));
    }

    /// Holds the sink for a run of accesses to this array alone. Accesses
    /// through the lease are recorded exactly like the array's own methods.
    pub fn lease(&mut self) -> ArrayLease<'_, T, S> {
        ArrayLease { region: self.region, data: &mut self.data, sink: self.sink.borrow_mut() }
    }

    /// Untraced view for assertions in tests and result extraction after
    /// the traced computation is over.
    pub fn peek(&self) -> &[T] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<T> {
        self.data
    }
}

pub struct ArrayLease<'a, T, S> {
    region: Region,
    data: &'a mut [T],
    sink: RefMut<'a, S>,
}

impl<T: Copy, S: TraceSink> ArrayLease<'_, T, S> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn read(&mut self, i: usize) -> T {
        let v = self.data[i];
        self.sink.record(AccessEvent::read(self.region, i as u64));
        v
    }

    #[inline(always)]
    pub fn write(&mut self, i: usize, v: T) {
        self.data[i] = v;
        self.sink.record(AccessEvent::write(self.region, i as u64));
    }

    #[inline(always)]
    pub fn update(&mut self, i: usize, f: impl FnOnce(T) -> T) {
        self.data[i] = f(self.data[i]);
        self.sink.record(AccessEvent::write(self.region, i as u64));
    }
}

/// True iff the two traces have the same (region, cell / granularity, op)
/// sequence.
pub fn trace_equal(a: &AccessTrace, b: &AccessTrace, granularity: u64) -> bool {
    first_divergence(a, b, granularity).is_none()
}

/// Offset of the first event where the bucketed traces differ. A length
/// mismatch diverges at the shorter length.
pub fn first_divergence(a: &AccessTrace, b: &AccessTrace, granularity: u64) -> Option<usize> {
    assert!(granularity > 0, "granularity must be positive");
    let pos = a
        .events
        .iter()
        .zip(&b.events)
        .position(|(x, y)| x.bucketed(granularity) != y.bucketed(granularity));
    match pos {
        Some(p) => Some(p),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

/// Total-variation distance between the empirical distributions of two
/// trace samples.
pub fn trace_statistical_distance(sample_a: &[AccessTrace], sample_b: &[AccessTrace]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::EmptyTraceSample);
    }
    let mut hist: HashMap<Vec<u8>, (usize, usize)> = HashMap::new();
    for t in sample_a {
        hist.entry(t.canonical_bytes()).or_default().0 += 1;
    }
    for t in sample_b {
        hist.entry(t.canonical_bytes()).or_default().1 += 1;
    }
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let l1: f64 = hist.values().map(|&(ca, cb)| (ca as f64 / na - cb as f64 / nb).abs()).sum();
    Ok((l1 / 2.0).min(1.0))
}

/// Shape of a Linear-aggregation trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeakLayout {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// Observer granularity in cells; 1 sees exact indices.
    pub granularity: u64,
}

/// Replays a Linear-aggregation trace and returns, per user, the set of
/// `G*` cells (or cacheline buckets) written while that user's entries were
/// being summed.
///
/// The trace must consist of `n*k` segments, each a read of the next `G`
/// cell optionally followed by a read and a write of the same `G*` cell
/// (dummy entries produce no `G*` access). Trailing `G*`-only events from
/// averaging are ignored.
pub fn leaked_indices(trace: &AccessTrace, layout: LeakLayout) -> Result<Vec<BTreeSet<u64>>> {
    let LeakLayout { n, k, d, granularity } = layout;
    if granularity == 0 {
        return Err(Error::InvalidParameter("granularity must be positive".into()));
    }
    let mismatch = |msg: String| Error::TraceShapeMismatch(msg);
    let total = n * k;
    let mut leaks = vec![BTreeSet::new(); n];
    let ev = &trace.events;
    let mut pos = 0;
    for q in 0..total {
        match ev.get(pos) {
            Some(e) if *e == AccessEvent::read(Region::GRADIENTS, q as u64) => pos += 1,
            other => {
                return Err(mismatch(format!("expected read of G[{q}] at event {pos}, found {other:?}")))
            }
        }
        if let (Some(r), Some(w)) = (ev.get(pos), ev.get(pos + 1)) {
            if r.region == Region::AGGREGATE && r.op == Op::Read {
                if *w != AccessEvent::write(Region::AGGREGATE, r.cell) {
                    return Err(mismatch(format!("unpaired G* read at event {pos}")));
                }
                if r.cell >= d as u64 {
                    return Err(mismatch(format!("G* cell {} outside model dimension {d}", r.cell)));
                }
                leaks[q / k].insert(r.cell / granularity);
                pos += 2;
            }
        }
    }
    if let Some(e) = ev[pos..].iter().find(|e| e.region != Region::AGGREGATE || e.cell >= d as u64) {
        return Err(mismatch(format!("unexpected trailing event {e:?}")));
    }
    Ok(leaks)
}
