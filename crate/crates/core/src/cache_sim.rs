//! Trace-driven simulation of a direct-mapped cache.
//!
//! Memory is an array of words. Word `x` lives in memory block `x / B` and can
//! only be cached in cache block `(x / B) mod C`. Every miss is either
//! compulsory (the memory block was never resident before) or a conflict miss;
//! capacity misses cannot be told apart from conflicts in a direct-mapped cache
//! and are counted as conflicts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use bitvec::vec::BitVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block size `B` (words per block) and block count `C` of a direct-mapped cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheGeometry {
    block_size: u64,
    num_blocks: u64,
}

impl CacheGeometry {
    pub fn new(block_size: u64, num_blocks: u64) -> Result<Self> {
        if !block_size.is_power_of_two() {
            return Err(Error::BlockSizeNotPowerOfTwo(block_size));
        }
        if !num_blocks.is_power_of_two() {
            return Err(Error::BlockCountNotPowerOfTwo(num_blocks));
        }
        Ok(Self {
            block_size,
            num_blocks,
        })
    }

    /// B = 8 words, C = 128 blocks. Small enough for fast tests.
    pub fn tiny() -> Self {
        Self {
            block_size: 8,
            num_blocks: 128,
        }
    }

    /// B = 8 words, C = 8192 blocks: a 512KB direct-mapped L2 with 8-word lines.
    pub fn paper_l2() -> Self {
        Self {
            block_size: 8,
            num_blocks: 8192,
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn num_blocks(&self) -> u64 {
        self.num_blocks
    }

    /// Cache capacity in words, `B * C`.
    pub fn capacity(&self) -> u64 {
        self.block_size * self.num_blocks
    }

    pub fn b(&self) -> f64 {
        self.block_size as f64
    }

    pub fn c(&self) -> f64 {
        self.num_blocks as f64
    }

    pub fn memory_block(&self, address: u64) -> u64 {
        address >> self.block_size.trailing_zeros()
    }

    pub fn cache_block(&self, address: u64) -> u64 {
        self.memory_block(address) & (self.num_blocks - 1)
    }
}

impl fmt::Display for CacheGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B={} C={}", self.block_size, self.num_blocks)
    }
}

/// Which array an access belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    Count,
    Data,
    Dest,
    Src,
    Seq(u32),
    Other,
}

impl Tag {
    /// Tag with the sequence index dropped, so all `Seq(i)` collapse to one family.
    pub fn family(self) -> Tag {
        match self {
            Tag::Seq(_) => Tag::Seq(0),
            t => t,
        }
    }

    pub fn family_name(self) -> &'static str {
        match self {
            Tag::Count => "COUNT",
            Tag::Data => "DATA",
            Tag::Dest => "DEST",
            Tag::Src => "SRC",
            Tag::Seq(_) => "SEQ",
            Tag::Other => "OTHER",
        }
    }

    fn slot(self) -> usize {
        match self {
            Tag::Count => 0,
            Tag::Data => 1,
            Tag::Dest => 2,
            Tag::Src => 3,
            Tag::Other => 4,
            Tag::Seq(i) => 5 + i as usize,
        }
    }

    fn from_slot(slot: usize) -> Tag {
        match slot {
            0 => Tag::Count,
            1 => Tag::Data,
            2 => Tag::Dest,
            3 => Tag::Src,
            4 => Tag::Other,
            s => Tag::Seq((s - 5) as u32),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Seq(i) => write!(f, "SEQ{i}"),
            t => f.write_str(t.family_name()),
        }
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "COUNT" => Tag::Count,
            "DATA" => Tag::Data,
            "DEST" => Tag::Dest,
            "SRC" => Tag::Src,
            "SEQ" => Tag::Seq(0),
            "OTHER" => Tag::Other,
            s => match s.strip_prefix("SEQ").map(str::parse::<u32>) {
                Some(Ok(i)) => Tag::Seq(i),
                _ => return Err(format!("unknown tag `{s}`")),
            },
        })
    }
}

/// One word access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRef {
    pub address: u64,
    pub tag: Tag,
}

impl MemRef {
    pub fn new(tag: Tag, address: u64) -> Self {
        Self { address, tag }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissKind {
    Compulsory,
    Conflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Hit,
    Miss(MissKind),
}

impl Outcome {
    pub fn is_miss(self) -> bool {
        matches!(self, Outcome::Miss(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagStats {
    pub accesses: u64,
    pub misses: u64,
    pub compulsory_misses: u64,
    pub conflict_misses: u64,
}

impl TagStats {
    fn record(&mut self, outcome: Outcome) {
        self.accesses += 1;
        match outcome {
            Outcome::Hit => {}
            Outcome::Miss(MissKind::Compulsory) => {
                self.misses += 1;
                self.compulsory_misses += 1;
            }
            Outcome::Miss(MissKind::Conflict) => {
                self.misses += 1;
                self.conflict_misses += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &TagStats) {
        self.accesses += other.accesses;
        self.misses += other.misses;
        self.compulsory_misses += other.compulsory_misses;
        self.conflict_misses += other.conflict_misses;
    }
}

/// Per-tag access and miss counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MissStats {
    by_tag: BTreeMap<Tag, TagStats>,
}

impl MissStats {
    pub fn get(&self, tag: Tag) -> TagStats {
        self.by_tag.get(&tag).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tag, &TagStats)> {
        self.by_tag.iter().map(|(t, s)| (*t, s))
    }

    pub fn total(&self) -> TagStats {
        let mut t = TagStats::default();
        for s in self.by_tag.values() {
            t.merge(s);
        }
        t
    }

    /// Sum over the given tags; `Seq(_)` in `tags` matches every sequence.
    pub fn sum_of(&self, tags: &[Tag]) -> TagStats {
        let mut t = TagStats::default();
        for (tag, s) in &self.by_tag {
            if tags.iter().any(|q| q.family() == tag.family()) {
                t.merge(s);
            }
        }
        t
    }

    /// Stats with all `Seq(i)` folded into `Seq(0)`.
    pub fn by_family(&self) -> MissStats {
        let mut out = MissStats::default();
        for (tag, s) in &self.by_tag {
            out.by_tag.entry(tag.family()).or_default().merge(s);
        }
        out
    }

    pub fn merge(&mut self, other: &MissStats) {
        for (tag, s) in &other.by_tag {
            self.by_tag.entry(*tag).or_default().merge(s);
        }
    }

    pub fn insert(&mut self, tag: Tag, stats: TagStats) {
        self.by_tag.insert(tag, stats);
    }

    pub fn is_empty(&self) -> bool {
        self.by_tag.values().all(|s| s.accesses == 0)
    }
}

// Blocks ever made resident. A dense bitmap when the address space is small enough.
#[derive(Debug, Clone)]
enum SeenBlocks {
    Dense(BitVec),
    Sparse(HashSet<u64>),
}

impl SeenBlocks {
    const DENSE_LIMIT: u64 = 1 << 30;

    fn new(blocks: u64) -> Self {
        if blocks <= Self::DENSE_LIMIT {
            SeenBlocks::Dense(BitVec::repeat(false, blocks as usize))
        } else {
            SeenBlocks::Sparse(HashSet::new())
        }
    }

    /// Marks `block` as seen, returning true if it was new.
    fn insert(&mut self, block: u64) -> bool {
        match self {
            SeenBlocks::Dense(bits) => {
                let fresh = !bits[block as usize];
                bits.set(block as usize, true);
                fresh
            }
            SeenBlocks::Sparse(set) => set.insert(block),
        }
    }
}

const EMPTY: u64 = u64::MAX;

/// A direct-mapped cache over a word-addressed memory of fixed size.
#[derive(Debug)]
pub struct Simulator {
    geom: CacheGeometry,
    address_space: u64,
    resident: Vec<u64>,
    seen: SeenBlocks,
    slots: Vec<TagStats>,
    totals: TagStats,
    deferred_error: Option<Error>,
}

impl Simulator {
    pub fn new(geom: CacheGeometry, address_space: u64) -> Result<Self> {
        if address_space == 0 {
            return Err(Error::EmptyAddressSpace);
        }
        let blocks = address_space.div_ceil(geom.block_size());
        Ok(Self {
            geom,
            address_space,
            resident: vec![EMPTY; geom.num_blocks() as usize],
            seen: SeenBlocks::new(blocks),
            slots: vec![TagStats::default(); 5],
            totals: TagStats::default(),
            deferred_error: None,
        })
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geom
    }

    pub fn address_space(&self) -> u64 {
        self.address_space
    }

    /// Number of memory blocks in the address space.
    pub fn memory_blocks(&self) -> u64 {
        self.address_space.div_ceil(self.geom.block_size())
    }

    /// Memory block held by cache block `set`, if any.
    pub fn resident_block(&self, set: u64) -> Option<u64> {
        let b = self.resident[set as usize];
        (b != EMPTY).then_some(b)
    }

    pub fn access(&mut self, r: MemRef) -> Result<Outcome> {
        if r.address >= self.address_space {
            return Err(Error::AddressOutOfRange {
                address: r.address,
                space: self.address_space,
            });
        }
        let block = self.geom.memory_block(r.address);
        let set = (block & (self.geom.num_blocks() - 1)) as usize;
        let outcome = if self.resident[set] == block {
            Outcome::Hit
        } else {
            self.resident[set] = block;
            if self.seen.insert(block) {
                Outcome::Miss(MissKind::Compulsory)
            } else {
                Outcome::Miss(MissKind::Conflict)
            }
        };
        let slot = r.tag.slot();
        if slot >= self.slots.len() {
            self.slots.resize(slot + 1, TagStats::default());
        }
        self.slots[slot].record(outcome);
        self.totals.record(outcome);
        Ok(outcome)
    }

    /// Feeds every record of `trace` and returns the accumulated statistics.
    pub fn run_trace<'a, I>(&mut self, trace: I) -> Result<MissStats>
    where
        I: IntoIterator<Item = &'a MemRef>,
    {
        for (position, r) in trace.into_iter().enumerate() {
            self.access(*r).map_err(|e| Error::Trace {
                position,
                source: Box::new(e),
            })?;
        }
        Ok(self.stats())
    }

    pub fn stats(&self) -> MissStats {
        let mut out = MissStats::default();
        for (slot, s) in self.slots.iter().enumerate() {
            if s.accesses > 0 {
                out.insert(Tag::from_slot(slot), *s);
            }
        }
        out
    }

    /// Accesses and misses over all tags.
    pub fn totals(&self) -> TagStats {
        self.totals
    }

    /// First error hit while used as a [`Probe`], if any.
    pub fn take_error(&mut self) -> Option<Error> {
        self.deferred_error.take()
    }
}

/// Receiver of the memory accesses made by an instrumented algorithm.
pub trait Probe {
    fn touch(&mut self, tag: Tag, address: u64);

    /// Marks the start of a named phase of the algorithm.
    fn phase(&mut self, _label: &'static str) {}
}

/// Discards every access.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoProbe;

impl Probe for NoProbe {
    #[inline(always)]
    fn touch(&mut self, _tag: Tag, _address: u64) {}
}

impl Probe for Vec<MemRef> {
    fn touch(&mut self, tag: Tag, address: u64) {
        self.push(MemRef::new(tag, address));
    }
}

impl Probe for Simulator {
    fn touch(&mut self, tag: Tag, address: u64) {
        if let Err(e) = self.access(MemRef::new(tag, address)) {
            self.deferred_error.get_or_insert(e);
        }
    }
}

/// Forwards every access except those tagged `OTHER`, which keeps only the
/// accesses the permute processes model.
pub struct ModelOnly<'a, P: Probe>(pub &'a mut P);

impl<P: Probe> Probe for ModelOnly<'_, P> {
    #[inline]
    fn touch(&mut self, tag: Tag, address: u64) {
        if tag != Tag::Other {
            self.0.touch(tag, address);
        }
    }

    fn phase(&mut self, label: &'static str) {
        self.0.phase(label);
    }
}

/// Writes a trace as `tag,address` lines.
pub fn dump_trace<W: Write>(mut out: W, trace: &[MemRef]) -> Result<()> {
    for r in trace {
        writeln!(out, "{},{}", r.tag, r.address)?;
    }
    Ok(())
}

/// Reads a trace written by [`dump_trace`]. Blank lines are skipped.
pub fn load_trace<R: BufRead>(input: R) -> Result<Vec<MemRef>> {
    let mut trace = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::TraceParse {
            line: i + 1,
            reason,
        };
        let (tag, addr) = line
            .split_once(',')
            .ok_or_else(|| bad("expected `tag,address`".into()))?;
        let tag = tag.trim().parse::<Tag>().map_err(bad)?;
        let address = addr.trim().parse::<u64>().map_err(|e| bad(e.to_string()))?;
        trace.push(MemRef::new(tag, address));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(b: u64, c: u64, space: u64) -> Simulator {
        Simulator::new(CacheGeometry::new(b, c).unwrap(), space).unwrap()
    }

    fn data(a: u64) -> MemRef {
        MemRef::new(Tag::Data, a)
    }

    #[test]
    fn construction() {
        let s = sim(4, 4, 64);
        assert_eq!(s.memory_blocks(), 16);
        assert!(s.stats().is_empty());
        assert!((0..4).all(|set| s.resident_block(set).is_none()));

        let s = sim(1, 1, 8);
        assert_eq!(s.memory_blocks(), 8);

        assert!(matches!(
            CacheGeometry::new(3, 4),
            Err(Error::BlockSizeNotPowerOfTwo(3))
        ));
        assert!(CacheGeometry::new(4, 6).is_err());
        assert!(Simulator::new(CacheGeometry::tiny(), 0).is_err());
    }

    #[test]
    fn mapping_rule_eviction() {
        let mut s = sim(4, 4, 64);
        assert_eq!(
            s.access(data(0)).unwrap(),
            Outcome::Miss(MissKind::Compulsory)
        );
        assert_eq!(
            s.access(data(16)).unwrap(),
            Outcome::Miss(MissKind::Compulsory)
        );
        assert_eq!(s.resident_block(0), Some(4));
        assert_eq!(
            s.access(data(0)).unwrap(),
            Outcome::Miss(MissKind::Conflict)
        );
    }

    #[test]
    fn intra_block_hit_and_distinct_sets() {
        let mut s = sim(4, 4, 64);
        assert!(s.access(data(0)).unwrap().is_miss());
        assert_eq!(s.access(data(1)).unwrap(), Outcome::Hit);

        let mut s = sim(4, 4, 64);
        assert_eq!(
            s.access(data(0)).unwrap(),
            Outcome::Miss(MissKind::Compulsory)
        );
        assert_eq!(
            s.access(data(20)).unwrap(),
            Outcome::Miss(MissKind::Compulsory)
        );
        assert_eq!(s.access(data(0)).unwrap(), Outcome::Hit);
        assert_eq!(s.access(data(20)).unwrap(), Outcome::Hit);
    }

    #[test]
    fn out_of_range() {
        let mut s = sim(4, 4, 64);
        assert!(matches!(
            s.access(data(64)),
            Err(Error::AddressOutOfRange {
                address: 64,
                space: 64
            })
        ));
        let err = s.run_trace(&[data(1), data(100)]).unwrap_err();
        assert!(matches!(err, Error::Trace { position: 1, .. }));
    }

    #[test]
    fn run_trace_basics() {
        let mut s = sim(4, 4, 64);
        assert!(s.run_trace(&[]).unwrap().is_empty());

        let mut s = sim(4, 4, 64);
        let trace = vec![data(5); 10];
        let st = s.run_trace(&trace).unwrap().get(Tag::Data);
        assert_eq!((st.accesses, st.misses, st.compulsory_misses), (10, 1, 1));
    }

    #[test]
    fn single_set_trace_hand_checked() {
        // Blocks 0,4,8,12 all map to set 0 with B=4, C=4.
        // Pass 1 over 4 blocks: 4 compulsory. Then revisit 0,4,8 and 12,0,4.
        let mut s = sim(4, 4, 64);
        let addrs = [0u64, 16, 32, 48, 0, 16, 32, 48, 0, 16];
        let trace: Vec<_> = addrs.iter().map(|&a| data(a)).collect();
        let st = s.run_trace(&trace).unwrap().get(Tag::Data);
        assert_eq!(st.accesses, 10);
        assert_eq!(st.misses, 10);
        assert_eq!(st.compulsory_misses, 4);
        assert_eq!(st.conflict_misses, 6);
    }

    #[test]
    fn sequential_scan_law() {
        let geom = CacheGeometry::new(8, 16).unwrap();
        for start in [0u64, 3, 7, 8, 13] {
            for w in [1u64, 5, 8, 9, 64, 100] {
                let mut s = Simulator::new(geom, 1024).unwrap();
                let trace: Vec<_> = (start..start + w).map(data).collect();
                let st = s.run_trace(&trace).unwrap().get(Tag::Data);
                let distinct = (start + w - 1) / 8 - start / 8 + 1;
                assert_eq!(st.misses, distinct, "start={start} w={w}");
                assert_eq!(st.compulsory_misses, distinct);
            }
        }
    }

    #[test]
    fn per_tag_accounting() {
        let mut s = sim(4, 4, 64);
        s.access(MemRef::new(Tag::Count, 0)).unwrap();
        s.access(MemRef::new(Tag::Seq(3), 16)).unwrap();
        s.access(MemRef::new(Tag::Seq(1), 0)).unwrap();
        let st = s.stats();
        assert_eq!(st.get(Tag::Count).misses, 1);
        assert_eq!(st.get(Tag::Seq(3)).compulsory_misses, 1);
        assert_eq!(st.get(Tag::Seq(1)).conflict_misses, 1);
        assert_eq!(st.by_family().get(Tag::Seq(0)).accesses, 2);
        assert_eq!(st.sum_of(&[Tag::Seq(0)]).misses, 2);
        assert_eq!(st.total().misses, 3);
        assert_eq!(s.totals().misses, 3);
    }

    #[test]
    fn trace_text_round_trip() {
        let trace = vec![
            MemRef::new(Tag::Count, 3),
            MemRef::new(Tag::Seq(12), 99),
            MemRef::new(Tag::Other, 0),
        ];
        let mut buf = Vec::new();
        dump_trace(&mut buf, &trace).unwrap();
        assert_eq!(
            String::from_utf8_lossy(&buf),
            "COUNT,3\nSEQ12,99\nOTHER,0\n"
        );
        assert_eq!(load_trace(buf.as_slice()).unwrap(), trace);
        assert!(load_trace("DATA;4\n".as_bytes()).is_err());
        assert!(load_trace("BOGUS,4\n".as_bytes()).is_err());
    }

    #[test]
    fn probe_defers_errors() {
        let mut s = sim(4, 4, 64);
        s.touch(Tag::Data, 3);
        s.touch(Tag::Data, 1000);
        assert!(s.take_error().is_some());
        assert_eq!(s.totals().accesses, 1);
    }
}
