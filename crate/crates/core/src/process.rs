//! Monte-Carlo runs of the random access processes that model a permute phase.
//!
//! Each round draws a class `x` with probability `p_x` and touches the count
//! word `c_x` (unless there is no count array) and then the next word of the
//! sequence `D_x`. The out-of-place variant reads one word of a sequential
//! source array first. Addresses go straight into a [`Simulator`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::cache_sim::{CacheGeometry, MemRef, MissStats, Simulator, Tag};
use crate::dist::ClassDistribution;
use crate::error::{Error, Result};

/// Largest address space a layout may claim.
pub const MAX_ADDRESS_SPACE: u64 = 1 << 40;

/// Deterministic generator used by every seeded run in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    InPlace,
    OutOfPlace,
    Sequences,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::InPlace => "inplace",
            Variant::OutOfPlace => "outofplace",
            Variant::Sequences => "sequences",
        }
    }

    /// Accesses emitted per round.
    pub fn accesses_per_round(self) -> u64 {
        match self {
            Variant::InPlace => 2,
            Variant::OutOfPlace => 3,
            Variant::Sequences => 1,
        }
    }

    fn has_count_array(self) -> bool {
        self != Variant::Sequences
    }

    fn pointer_tag(self, class: usize) -> Tag {
        match self {
            Variant::InPlace => Tag::Data,
            Variant::OutOfPlace => Tag::Dest,
            Variant::Sequences => Tag::Seq(class as u32),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inplace" | "in-place" => Ok(Variant::InPlace),
            "outofplace" | "out-of-place" => Ok(Variant::OutOfPlace),
            "sequences" | "seq" => Ok(Variant::Sequences),
            _ => Err(format!("unknown process variant `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    dist: ClassDistribution,
    rounds: u64,
    geom: CacheGeometry,
    seed: u64,
    variant: Variant,
}

impl ProcessParams {
    /// Validates the parameters. For the variants with a count array the
    /// distribution is padded with zero-probability classes so that `B | k`,
    /// and `2 <= k <= B*C` must hold afterwards.
    pub fn new(
        dist: ClassDistribution,
        rounds: u64,
        geom: CacheGeometry,
        seed: u64,
        variant: Variant,
    ) -> Result<Self> {
        let dist = if variant.has_count_array() {
            let d = dist.padded_to(geom.block_size() as usize);
            let k = d.k() as u64;
            if k < 2 || k > geom.capacity() {
                return Err(Error::Params(format!(
                    "need 2 <= k <= B*C = {}, got k = {k}",
                    geom.capacity()
                )));
            }
            d
        } else {
            dist
        };
        Ok(Self {
            dist,
            rounds,
            geom,
            seed,
            variant,
        })
    }

    pub fn dist(&self) -> &ClassDistribution {
        &self.dist
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn geom(&self) -> CacheGeometry {
        self.geom
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Base addresses of every array a process touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressPlan {
    /// First count word; always block aligned.
    pub count_base: u64,
    /// Start of each class's sequence.
    pub pointer_bases: Vec<u64>,
    /// Start of the source array (out-of-place only).
    pub src_base: Option<u64>,
    /// Words needed to hold everything.
    pub address_space: u64,
    /// Words reserved for each sequence.
    pub region_len: u64,
}

fn overflow() -> Error {
    Error::AddressSpaceTooSmall {
        limit: MAX_ADDRESS_SPACE,
    }
}

/// Places the count array at address 0 and gives every sequence (and the
/// source array) its own region of `n` words, starting at an independent
/// uniform offset in `[0, B*C)` from a cache-aligned region boundary.
///
/// Offsets are the first draws taken from `rng`: one per class in order, then
/// one for the source array.
pub fn layout_addresses<R: Rng>(params: &ProcessParams, rng: &mut R) -> Result<AddressPlan> {
    let bc = params.geom.capacity();
    let k = params.dist.k() as u64;
    let count_words = if params.variant.has_count_array() {
        k
    } else {
        0
    };
    let region_len = params.rounds.max(1);

    let round_up = |x: u64| -> Result<u64> { x.checked_next_multiple_of(bc).ok_or_else(overflow) };
    let first = round_up(count_words)?;
    let stride = round_up(region_len.checked_add(bc).ok_or_else(overflow)?)?;

    let mut pointer_bases = Vec::with_capacity(k as usize);
    for i in 0..k {
        let offset = rng.random_range(0..bc);
        let base = i
            .checked_mul(stride)
            .and_then(|x| x.checked_add(first))
            .ok_or_else(overflow)?;
        pointer_bases.push(base + offset);
    }
    let mut end = k
        .checked_mul(stride)
        .and_then(|x| x.checked_add(first))
        .ok_or_else(overflow)?;
    let src_base = if params.variant == Variant::OutOfPlace {
        let base = end + rng.random_range(0..bc);
        end = end.checked_add(stride).ok_or_else(overflow)?;
        Some(base)
    } else {
        None
    };
    if end > MAX_ADDRESS_SPACE {
        return Err(overflow());
    }
    Ok(AddressPlan {
        count_base: 0,
        pointer_bases,
        src_base,
        address_space: end.max(1),
        region_len,
    })
}

#[derive(Debug, Clone)]
pub struct ProcessRunReport {
    pub variant: Variant,
    pub k: usize,
    pub geom: CacheGeometry,
    pub seed: u64,
    pub rounds: u64,
    pub stats: MissStats,
    /// How many rounds drew each class.
    pub draws: Vec<u64>,
    pub plan: AddressPlan,
    /// Final position of every sequence pointer.
    pub final_pointers: Vec<u64>,
}

impl ProcessRunReport {
    /// Misses per round for one tag family (`Tag::Seq(_)` covers all sequences).
    pub fn per_round_rate(&self, tag: Tag) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        self.stats.sum_of(&[tag]).misses as f64 / self.rounds as f64
    }

    /// Misses per round over every access the process makes.
    pub fn total_rate(&self) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        self.stats.total().misses as f64 / self.rounds as f64
    }

    pub fn tag_families(&self) -> Vec<Tag> {
        let mut tags = vec![];
        if self.variant == Variant::OutOfPlace {
            tags.push(Tag::Src);
        }
        if self.variant.has_count_array() {
            tags.push(Tag::Count);
        }
        tags.push(self.variant.pointer_tag(0).family());
        tags
    }
}

fn run(params: &ProcessParams, trace: Option<&mut Vec<MemRef>>) -> Result<ProcessRunReport> {
    let mut rng = seeded_rng(params.seed);
    let plan = layout_addresses(params, &mut rng)?;
    let mut sim = Simulator::new(params.geom, plan.address_space)?;
    let variant = params.variant;
    let k = params.dist.k();
    let sampler = WeightedAliasIndex::new(params.dist.probs().to_vec())
        .map_err(|e| Error::Distribution(e.to_string()))?;

    let mut pointers = plan.pointer_bases.clone();
    let mut draws = vec![0u64; k];
    let mut src = plan.src_base;
    let mut trace = trace;
    let mut touch = |sim: &mut Simulator, r: MemRef| -> Result<()> {
        if let Some(t) = trace.as_deref_mut() {
            t.push(r);
        }
        sim.access(r).map(|_| ())
    };

    for _ in 0..params.rounds {
        if let Some(s) = src.as_mut() {
            touch(&mut sim, MemRef::new(Tag::Src, *s))?;
            *s += 1;
        }
        let x = sampler.sample(&mut rng);
        draws[x] += 1;
        if variant.has_count_array() {
            touch(
                &mut sim,
                MemRef::new(Tag::Count, plan.count_base + x as u64),
            )?;
        }
        touch(&mut sim, MemRef::new(variant.pointer_tag(x), pointers[x]))?;
        pointers[x] += 1;
    }

    Ok(ProcessRunReport {
        variant,
        k,
        geom: params.geom,
        seed: params.seed,
        rounds: params.rounds,
        stats: sim.stats(),
        draws,
        plan,
        final_pointers: pointers,
    })
}

fn expect_variant(params: &ProcessParams, v: Variant) -> Result<()> {
    if params.variant != v {
        return Err(Error::Params(format!(
            "expected variant {v}, got {}",
            params.variant
        )));
    }
    Ok(())
}

pub fn run_inplace_process(params: &ProcessParams) -> Result<ProcessRunReport> {
    expect_variant(params, Variant::InPlace)?;
    run(params, None)
}

pub fn run_outofplace_process(params: &ProcessParams) -> Result<ProcessRunReport> {
    expect_variant(params, Variant::OutOfPlace)?;
    run(params, None)
}

pub fn run_sequences_process(params: &ProcessParams) -> Result<ProcessRunReport> {
    expect_variant(params, Variant::Sequences)?;
    run(params, None)
}

/// Runs whichever variant `params` names.
pub fn run_process(params: &ProcessParams) -> Result<ProcessRunReport> {
    run(params, None)
}

/// Runs the process and also returns the full address trace.
pub fn run_process_traced(params: &ProcessParams) -> Result<(ProcessRunReport, Vec<MemRef>)> {
    let mut trace =
        Vec::with_capacity((params.rounds * params.variant.accesses_per_round()) as usize);
    let report = run(params, Some(&mut trace))?;
    Ok((report, trace))
}
