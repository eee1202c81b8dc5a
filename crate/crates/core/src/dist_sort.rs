//! One pass of distribution sorting: count phase, then an out-of-place or an
//! in-place (cycle-leader) permute phase.
//!
//! Keys are machine words. Every phase has a probed form that reports each
//! memory access to a [`Probe`]; the plain forms call it with [`NoProbe`].
//! Accesses that the permute processes model are tagged `COUNT`, `DATA`,
//! `DEST` and `SRC`; bookkeeping such as cycle-leader search is tagged `OTHER`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache_sim::{CacheGeometry, NoProbe, Probe, Tag};
use crate::error::{Error, Result};

type ClassFn = dyn Fn(u64) -> Option<usize> + Send + Sync;

/// Maps keys to classes `0..k`.
#[derive(Clone)]
pub enum Classifier {
    /// `floor((key - lo) / (hi - lo) * k)` for `lo <= key < hi`.
    Range { lo: u64, hi: u64, k: usize },
    /// `(key >> shift) & mask`; `mask + 1` must be a power of two.
    TopBits { shift: u32, mask: u64 },
    /// Arbitrary function; `None` marks a key outside the domain.
    Custom { k: usize, f: Arc<ClassFn> },
}

impl fmt::Debug for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Classifier::Range { lo, hi, k } => write!(f, "Range({lo}..{hi}, k={k})"),
            Classifier::TopBits { shift, mask } => {
                write!(f, "TopBits(shift={shift}, mask={mask:#x})")
            }
            Classifier::Custom { k, .. } => write!(f, "Custom(k={k})"),
        }
    }
}

impl Classifier {
    pub fn range(lo: u64, hi: u64, k: usize) -> Result<Self> {
        if lo >= hi || k == 0 {
            return Err(Error::Precondition(format!(
                "bad range classifier {lo}..{hi}, k = {k}"
            )));
        }
        Ok(Classifier::Range { lo, hi, k })
    }

    /// Classes from `bits` bits of the word starting at bit `shift`.
    pub fn top_bits(shift: u32, bits: u32) -> Result<Self> {
        if bits == 0 || bits > 32 || shift >= 64 {
            return Err(Error::Precondition(format!(
                "bad bit slice: shift {shift}, {bits} bits"
            )));
        }
        Ok(Classifier::TopBits {
            shift,
            mask: (1u64 << bits) - 1,
        })
    }

    pub fn custom(k: usize, f: impl Fn(u64) -> Option<usize> + Send + Sync + 'static) -> Self {
        Classifier::Custom { k, f: Arc::new(f) }
    }

    /// Identity on `0..k`, handy for tests.
    pub fn identity(k: usize) -> Self {
        Self::custom(k, move |x| (x < k as u64).then_some(x as usize))
    }

    pub fn k(&self) -> usize {
        match self {
            Classifier::Range { k, .. } | Classifier::Custom { k, .. } => *k,
            Classifier::TopBits { mask, .. } => *mask as usize + 1,
        }
    }

    #[inline]
    pub fn classify(&self, key: u64) -> Option<usize> {
        match self {
            Classifier::Range { lo, hi, k } => {
                if key < *lo || key >= *hi {
                    return None;
                }
                let c = (key - lo) as u128 * *k as u128 / (hi - lo) as u128;
                Some((c as usize).min(k - 1))
            }
            Classifier::TopBits { shift, mask } => Some(((key >> shift) & mask) as usize),
            Classifier::Custom { k, f } => f(key).filter(|&c| c < *k),
        }
    }
}

/// Class offsets after the count phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountArrays {
    /// Next free slot of each class; starts as the prefix sums of class sizes.
    pub count: Vec<usize>,
    /// Frozen copy of the initial `count`.
    pub start: Vec<usize>,
    /// Total number of keys.
    pub n: usize,
}

impl CountArrays {
    pub fn k(&self) -> usize {
        self.start.len()
    }

    pub fn class_size(&self, j: usize) -> usize {
        self.class_end(j) - self.start[j]
    }

    pub fn class_end(&self, j: usize) -> usize {
        self.start.get(j + 1).copied().unwrap_or(self.n)
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k()).map(|j| self.class_size(j)).collect()
    }
}

/// Word addresses of the arrays a pass touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortLayout {
    pub count_base: u64,
    pub start_base: u64,
    pub data_base: u64,
    pub dest_base: u64,
    pub address_space: u64,
}

impl SortLayout {
    /// COUNT, START, DATA and DEST back to back with no gaps.
    pub fn packed(n: usize, k: usize) -> Self {
        let (n, k) = (n as u64, k as u64);
        Self {
            count_base: 0,
            start_base: k,
            data_base: 2 * k,
            dest_base: 2 * k + n,
            address_space: (2 * k + 2 * n).max(1),
        }
    }

    /// COUNT at address 0 followed by START; DATA and DEST each start at a
    /// cache-aligned boundary plus an independent uniform offset in `[0, B*C)`.
    pub fn randomized<R: Rng>(geom: CacheGeometry, n: usize, k: usize, rng: &mut R) -> Self {
        let bc = geom.capacity();
        let (n, k) = (n as u64, k as u64);
        let data_base = (2 * k).next_multiple_of(bc) + rng.random_range(0..bc);
        let dest_base = (data_base + n).next_multiple_of(bc) + rng.random_range(0..bc);
        Self {
            count_base: 0,
            start_base: k,
            data_base,
            dest_base,
            address_space: dest_base + n.max(1),
        }
    }
}

/// Bookkeeping from an in-place permute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PermuteStats {
    /// Executions of the swap step; always equals `n`.
    pub swaps: u64,
    pub cycles: u64,
}

/// Counts class sizes and turns them into starting offsets.
pub fn count_phase(data: &[u64], cls: &Classifier) -> Result<CountArrays> {
    count_phase_probed(
        data,
        cls,
        &SortLayout::packed(data.len(), cls.k()),
        &mut NoProbe,
    )
}

pub fn count_phase_probed<P: Probe>(
    data: &[u64],
    cls: &Classifier,
    layout: &SortLayout,
    probe: &mut P,
) -> Result<CountArrays> {
    probe.phase("count");
    let k = cls.k();
    let mut count = vec![0usize; k];
    for (i, &key) in data.iter().enumerate() {
        probe.touch(Tag::Data, layout.data_base + i as u64);
        let x = cls
            .classify(key)
            .ok_or(Error::KeyOutOfDomain { index: i })?;
        probe.touch(Tag::Count, layout.count_base + x as u64);
        count[x] += 1;
    }
    let mut sum = 0;
    for (j, c) in count.iter_mut().enumerate() {
        probe.touch(Tag::Count, layout.count_base + j as u64);
        probe.touch(Tag::Other, layout.start_base + j as u64);
        let size = *c;
        *c = sum;
        sum += size;
    }
    Ok(CountArrays {
        start: count.clone(),
        count,
        n: data.len(),
    })
}

fn check_counts(data_len: usize, counts: &CountArrays, cls: &Classifier) -> Result<()> {
    if counts.n != data_len || counts.k() != cls.k() || counts.count.len() != counts.k() {
        return Err(Error::Precondition(format!(
            "count arrays for n = {}, k = {} used with n = {data_len}, k = {}",
            counts.n,
            counts.k(),
            cls.k()
        )));
    }
    Ok(())
}

/// Scatters `data` into a new array grouped by class. Stable.
pub fn permute_out_of_place(
    data: &[u64],
    counts: CountArrays,
    cls: &Classifier,
) -> Result<Vec<u64>> {
    permute_out_of_place_probed(
        data,
        counts,
        cls,
        &SortLayout::packed(data.len(), cls.k()),
        &mut NoProbe,
    )
}

pub fn permute_out_of_place_probed<P: Probe>(
    data: &[u64],
    mut counts: CountArrays,
    cls: &Classifier,
    layout: &SortLayout,
    probe: &mut P,
) -> Result<Vec<u64>> {
    check_counts(data.len(), &counts, cls)?;
    probe.phase("permute");
    let mut dest = vec![0u64; data.len()];
    for (i, &key) in data.iter().enumerate() {
        probe.touch(Tag::Src, layout.data_base + i as u64);
        let x = cls
            .classify(key)
            .ok_or(Error::KeyOutOfDomain { index: i })?;
        let idx = counts.count[x];
        probe.touch(Tag::Count, layout.count_base + x as u64);
        counts.count[x] += 1;
        probe.touch(Tag::Dest, layout.dest_base + idx as u64);
        dest[idx] = key;
    }
    Ok(dest)
}

/// Groups `data` by class in place by following permutation cycles. Not stable.
pub fn permute_in_place(
    data: &mut [u64],
    counts: CountArrays,
    cls: &Classifier,
) -> Result<PermuteStats> {
    let layout = SortLayout::packed(data.len(), cls.k());
    permute_in_place_probed(data, counts, cls, &layout, &mut NoProbe)
}

pub fn permute_in_place_probed<P: Probe>(
    data: &mut [u64],
    mut counts: CountArrays,
    cls: &Classifier,
    layout: &SortLayout,
    probe: &mut P,
) -> Result<PermuteStats> {
    check_counts(data.len(), &counts, cls)?;
    probe.phase("permute");
    let n = data.len();
    let mut stats = PermuteStats::default();
    if n == 0 {
        return Ok(stats);
    }
    let count = &mut counts.count;
    let start = &counts.start;

    let mut leader = n - 1;
    loop {
        // Lift the key out of the leader position.
        probe.touch(Tag::Other, layout.data_base + leader as u64);
        let mut key = data[leader];
        stats.cycles += 1;
        let mut x;
        loop {
            x = cls
                .classify(key)
                .ok_or(Error::KeyOutOfDomain { index: leader })?;
            let idx = count[x];
            probe.touch(Tag::Count, layout.count_base + x as u64);
            count[x] += 1;
            probe.touch(Tag::Data, layout.data_base + idx as u64);
            std::mem::swap(&mut key, &mut data[idx]);
            stats.swaps += 1;
            if idx == leader {
                break;
            }
        }
        // Skip classes that are already complete.
        while x > 0 {
            probe.touch(Tag::Other, layout.count_base + (x - 1) as u64);
            probe.touch(Tag::Other, layout.start_base + x as u64);
            if count[x - 1] < start[x] {
                break;
            }
            x -= 1;
        }
        // Next leader: the last slot of the highest incomplete class.
        if x == 0 {
            break;
        }
        probe.touch(Tag::Other, layout.start_base + x as u64);
        leader = start[x] - 1;
    }
    Ok(stats)
}

/// Which permute a pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PermuteKind {
    InPlace,
    OutOfPlace,
}

/// One full distribution pass (count + permute) over `data`, reporting
/// accesses to `probe`. Returns the count arrays as they stood after counting.
pub fn distribute_probed<P: Probe>(
    data: &mut Vec<u64>,
    cls: &Classifier,
    kind: PermuteKind,
    layout: &SortLayout,
    probe: &mut P,
) -> Result<CountArrays> {
    let counts = count_phase_probed(data, cls, layout, probe)?;
    match kind {
        PermuteKind::InPlace => {
            permute_in_place_probed(data, counts.clone(), cls, layout, probe)?;
        }
        PermuteKind::OutOfPlace => {
            *data = permute_out_of_place_probed(data, counts.clone(), cls, layout, probe)?;
        }
    }
    Ok(counts)
}

pub fn distribute(data: &mut Vec<u64>, cls: &Classifier, kind: PermuteKind) -> Result<CountArrays> {
    let layout = SortLayout::packed(data.len(), cls.k());
    distribute_probed(data, cls, kind, &layout, &mut NoProbe)
}
