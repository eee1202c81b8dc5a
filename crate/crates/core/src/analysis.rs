//! Expected cache misses of the permute-phase processes.
//!
//! Everything here is a function of a [`CacheGeometry`] and a class
//! distribution. Rates are per round; totals are over `n` rounds and include
//! the additive first-access terms. The exact expectations contain infinite
//! series of multinomial expectations, which are estimated by Monte Carlo
//! (see [`Estimator`]); the closed-form bounds are evaluated directly.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::cache_sim::CacheGeometry;
use crate::dist::ClassDistribution;
use crate::error::{Error, Result};
use crate::process::seeded_rng;

/// Two-sided 99% normal quantile.
const Z99: f64 = 2.575_829_303_548_901;

/// Hard cap on the number of series terms evaluated per sample path.
pub const MAX_SERIES_TERMS: u64 = 1_000_000;

/// Probability that `x` consecutive fresh words of one sequence, starting at
/// a uniform position, avoid a fixed cache block.
pub fn f_conflict(x: u64, geom: CacheGeometry) -> f64 {
    let b = geom.block_size();
    let bc = geom.capacity();
    if x == 0 {
        1.0
    } else if x <= bc - b + 1 {
        1.0 - (x + b - 1) as f64 / bc as f64
    } else {
        0.0
    }
}

/// Fraction of the cache covered by the count blocks that received at least
/// one access, given per-class access counts `m`.
pub fn g_countload(m: &[u64], geom: CacheGeometry) -> Result<f64> {
    let b = geom.block_size() as usize;
    if !m.len().is_multiple_of(b) {
        return Err(Error::Precondition(format!(
            "access vector of length {} is not a multiple of B = {b}",
            m.len()
        )));
    }
    let touched = m.chunks(b).filter(|c| c.iter().any(|&x| x > 0)).count();
    Ok(touched as f64 / geom.c())
}

/// Geometry plus class distribution, padded with empty classes so that `B | k`.
#[derive(Debug, Clone)]
pub struct OccupancyContext {
    geom: CacheGeometry,
    original: ClassDistribution,
    dist: ClassDistribution,
    blocks: Vec<f64>,
}

impl OccupancyContext {
    pub fn new(geom: CacheGeometry, dist: ClassDistribution) -> Self {
        let padded = dist.padded_to(geom.block_size() as usize);
        let blocks = padded.block_probs(geom.block_size() as usize);
        Self {
            geom,
            original: dist,
            dist: padded,
            blocks,
        }
    }

    pub fn uniform(geom: CacheGeometry, k: usize) -> Result<Self> {
        Ok(Self::new(geom, ClassDistribution::uniform(k)?))
    }

    pub fn geom(&self) -> CacheGeometry {
        self.geom
    }

    /// Padded distribution.
    pub fn dist(&self) -> &ClassDistribution {
        &self.dist
    }

    /// Distribution as given, before padding.
    pub fn original(&self) -> &ClassDistribution {
        &self.original
    }

    pub fn k(&self) -> usize {
        self.dist.k()
    }

    pub fn block_probs(&self) -> &[f64] {
        &self.blocks
    }

    /// `a^i` for class `i`.
    pub fn a(&self, i: usize) -> Vec<f64> {
        self.dist.excluding_class(i)
    }

    /// `b^i` for count block `i`.
    pub fn b(&self, i: usize) -> Vec<f64> {
        self.dist
            .excluding_block(i, self.geom.block_size() as usize)
    }

    fn require_in_place_shape(&self) -> Result<()> {
        let k = self.k() as u64;
        if k < 2 || k > self.geom.capacity() {
            return Err(Error::Precondition(format!(
                "need 2 <= k <= B*C = {}, got k = {k}",
                self.geom.capacity()
            )));
        }
        Ok(())
    }
}

/// The formulas that can be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formula {
    /// Exact in-place expectation (Monte Carlo).
    Thm1,
    /// In-place upper bound, general distribution.
    Thm2,
    /// In-place lower bound, requires every `p_i >= 1/C`.
    Thm3,
    /// Exact out-of-place expectation (Monte Carlo).
    Thm4,
    /// Out-of-place upper bound, general distribution.
    Thm5,
    /// MSB radix first-pass bound with `g` groups of `K` pointers.
    Thm6,
    /// Uniform in-place upper bound.
    Cor1,
    /// Uniform in-place lower bound.
    Cor2,
    /// Uniform out-of-place upper bound, short form.
    Cor3a,
    /// Uniform out-of-place upper bound, long form including source-array misses.
    Cor3b,
    /// Multiple-sequence upper bound, general distribution.
    Seq,
    /// Multiple-sequence upper bound, uniform.
    SeqCor,
}

impl Formula {
    pub const ALL: [Formula; 12] = [
        Formula::Thm1,
        Formula::Thm2,
        Formula::Thm3,
        Formula::Thm4,
        Formula::Thm5,
        Formula::Thm6,
        Formula::Cor1,
        Formula::Cor2,
        Formula::Cor3a,
        Formula::Cor3b,
        Formula::Seq,
        Formula::SeqCor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Formula::Thm1 => "thm1",
            Formula::Thm2 => "thm2",
            Formula::Thm3 => "thm3",
            Formula::Thm4 => "thm4",
            Formula::Thm5 => "thm5",
            Formula::Thm6 => "thm6",
            Formula::Cor1 => "cor1",
            Formula::Cor2 => "cor2",
            Formula::Cor3a => "cor3a",
            Formula::Cor3b => "cor3b",
            Formula::Seq => "seq",
            Formula::SeqCor => "seqcor",
        }
    }

    /// Whether the formula bounds misses from below, above, or estimates them.
    pub fn role(self) -> BoundRole {
        match self {
            Formula::Thm1 | Formula::Thm4 => BoundRole::Exact,
            Formula::Thm3 | Formula::Cor2 => BoundRole::Lower,
            _ => BoundRole::Upper,
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formula {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Formula::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown formula `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundRole {
    Lower,
    Upper,
    Exact,
}

/// Per-round miss probabilities for the count array, the pointers and the
/// source array.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub p_c: Option<f64>,
    pub p_d: Option<f64>,
    pub p_s: Option<f64>,
}

impl Components {
    pub fn sum(&self) -> f64 {
        self.p_c.unwrap_or(0.0) + self.p_d.unwrap_or(0.0) + self.p_s.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactEstimate {
    /// Estimated misses per round.
    pub mean: f64,
    /// Half-width of a 99% interval, sampling plus series truncation.
    pub ci_halfwidth: f64,
    pub samples: usize,
}

/// One named summand of a formula, for debugging evaluations term by term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
}

fn term(name: &str, value: f64) -> Term {
    Term {
        name: name.to_string(),
        value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub formula: Formula,
    pub k: usize,
    pub n: u64,
    /// Misses per round (sum of the clamped components, or the closed form).
    pub rate: f64,
    pub components: Components,
    /// Lower bound on expected misses over `n` rounds, when the formula gives one.
    pub lower_total: Option<f64>,
    /// Upper bound on expected misses over `n` rounds, when the formula gives one.
    pub upper_total: Option<f64>,
    pub exact_estimate: Option<ExactEstimate>,
    /// Set when a raw probability fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
    pub caveat: Option<String>,
    pub terms: Vec<Term>,
}

impl BoundReport {
    fn new(formula: Formula, k: usize, n: u64) -> Self {
        Self {
            formula,
            k,
            n,
            rate: 0.0,
            components: Components::default(),
            lower_total: None,
            upper_total: None,
            exact_estimate: None,
            clamped: false,
            caveat: None,
            terms: Vec::new(),
        }
    }

    fn clamp(&mut self, raw: f64) -> f64 {
        if !(0.0..=1.0).contains(&raw) {
            self.clamped = true;
        }
        raw.clamp(0.0, 1.0)
    }
}

// x*y/(x+y), taking 0/0 as 0.
fn harmonic_term(x: f64, y: f64) -> f64 {
    if x + y > 0.0 {
        x * y / (x + y)
    } else {
        0.0
    }
}

/// Miss probability of one access to the sequential source array.
pub fn p_s(geom: CacheGeometry) -> f64 {
    let (b, c) = (geom.b(), geom.c());
    let keep = 1.0 - 1.0 / c;
    1.0 / b + (b - 1.0) / b * (1.0 - keep * keep)
}

/// Sums shared by the closed-form upper bounds.
struct PairSums {
    /// `sum_i sum_j p_i P_j / (p_i + P_j)` over classes `i` and blocks `j`.
    class_block: f64,
    /// `sum_i sum_j p_i p_j / (p_i + p_j)` over classes.
    class_class: f64,
}

fn pair_sums(p: &[f64], blocks: &[f64]) -> PairSums {
    let mut class_block = 0.0;
    let mut class_class = 0.0;
    for &pi in p {
        for &pj in blocks {
            class_block += harmonic_term(pi, pj);
        }
        for &pj in p {
            class_class += harmonic_term(pi, pj);
        }
    }
    PairSums {
        class_block,
        class_class,
    }
}

/// Closed-form upper bound for the in-place process.
pub fn upper_inplace(ctx: &OccupancyContext, n: u64) -> Result<BoundReport> {
    ctx.require_in_place_shape()?;
    let (b, c) = (ctx.geom.b(), ctx.geom.c());
    let k = ctx.k() as f64;
    let sums = pair_sums(ctx.dist.probs(), &ctx.blocks);

    let pd_terms = [
        term("p_d: 1/B", 1.0 / b),
        term("p_d: k/(BC)", k / (b * c)),
        term(
            "p_d: (B-1)/(BC) * sum p_i P_j/(p_i+P_j)",
            (b - 1.0) / (b * c) * sums.class_block,
        ),
        term(
            "p_d: (B-1)^2/(B^2 C) * sum p_i p_j/(p_i+p_j)",
            (b - 1.0) / (b * c) * (b - 1.0) / b * sums.class_class,
        ),
    ];
    // sum_i sum_j P_i p_j/(P_i+p_j) over blocks i, classes j is the same double sum.
    let pc_terms = [
        term("p_c: k/(B^2 C)", k / (b * b * c)),
        term(
            "p_c: (B-1)/(BC) * sum P_i p_j/(P_i+p_j)",
            (b - 1.0) / (b * c) * sums.class_block,
        ),
    ];
    let mut r = BoundReport::new(Formula::Thm2, ctx.k(), n);
    let p_d = r.clamp(pd_terms.iter().map(|t| t.value).sum());
    let p_c = r.clamp(pc_terms.iter().map(|t| t.value).sum());
    r.components = Components {
        p_c: Some(p_c),
        p_d: Some(p_d),
        p_s: None,
    };
    r.rate = p_c + p_d;
    r.upper_total = Some(n as f64 * r.rate + k * (1.0 + 1.0 / b));
    r.terms.extend(pd_terms);
    r.terms.extend(pc_terms);
    Ok(r)
}

/// Closed-form upper bound for the out-of-place process.
pub fn upper_outofplace(ctx: &OccupancyContext, n: u64) -> Result<BoundReport> {
    ctx.require_in_place_shape()?;
    let (b, c) = (ctx.geom.b(), ctx.geom.c());
    let k = ctx.k() as f64;
    let sums = pair_sums(ctx.dist.probs(), &ctx.blocks);

    let pd_terms = [
        term("p_d: 1/B", 1.0 / b),
        term("p_d: 2(B-1)k/(B^2 C)", 2.0 * (b - 1.0) * k / (b * b * c)),
        term(
            "p_d: (B-1)/(BC) * sum p_i P_j/(p_i+P_j)",
            (b - 1.0) / (b * c) * sums.class_block,
        ),
        term(
            "p_d: (B-1)^2/(B^2 C) * (1 + sum p_i p_j/(p_i+p_j))",
            (b - 1.0) * (b - 1.0) / (b * b * c) * (1.0 + sums.class_class),
        ),
    ];
    let pc_terms = [
        term("p_c: 2k/(B^2 C)", 2.0 * k / (b * b * c)),
        term(
            "p_c: (B-1)/(BC) * (1 + sum P_i p_j/(P_i+p_j))",
            (b - 1.0) / (b * c) * (1.0 + sums.class_block),
        ),
    ];
    let mut r = BoundReport::new(Formula::Thm5, ctx.k(), n);
    let p_d = r.clamp(pd_terms.iter().map(|t| t.value).sum());
    let p_c = r.clamp(pc_terms.iter().map(|t| t.value).sum());
    let ps = p_s(ctx.geom);
    r.components = Components {
        p_c: Some(p_c),
        p_d: Some(p_d),
        p_s: Some(ps),
    };
    r.rate = p_c + p_d + ps;
    r.upper_total = Some(n as f64 * r.rate + k * (1.0 + 1.0 / b) + 1.0);
    r.terms.extend(pd_terms);
    r.terms.extend(pc_terms);
    r.terms.push(term("p_s", ps));
    Ok(r)
}

/// Closed-form upper bound for `k` randomly interleaved sequences (no count array).
pub fn upper_sequences(ctx: &OccupancyContext, n: u64) -> Result<BoundReport> {
    let dist = ctx.original();
    let (b, c) = (ctx.geom.b(), ctx.geom.c());
    let k = dist.k() as f64;
    let p = dist.probs();
    let class_class: f64 = p
        .iter()
        .map(|&pi| p.iter().map(|&pj| harmonic_term(pi, pj)).sum::<f64>())
        .sum();
    let terms = [
        term("1/B", 1.0 / b),
        term("k(B-1)/(B^2 C)", k * (b - 1.0) / (b * b * c)),
        term(
            "(B-1)^2/(B^2 C) * sum p_i p_j/(p_i+p_j)",
            (b - 1.0) * (b - 1.0) / (b * b * c) * class_class,
        ),
    ];
    let mut r = BoundReport::new(Formula::Seq, dist.k(), n);
    let p_d = r.clamp(terms.iter().map(|t| t.value).sum());
    r.components.p_d = Some(p_d);
    r.rate = p_d;
    r.upper_total = Some(n as f64 * p_d + k);
    r.terms.extend(terms);
    Ok(r)
}

/// Lower bound for the in-place process (also a lower bound for the
/// out-of-place process and for sequence accesses).
///
/// Requires every class with non-zero probability to have `p_i >= 1/C`; only
/// those classes enter the sums and `k` counts only them. The `O(e^-B)`
/// correction is dropped and reported as a caveat.
pub fn lower_inplace(ctx: &OccupancyContext, n: u64) -> Result<BoundReport> {
    let c = ctx.geom.c();
    let p: Vec<f64> = ctx
        .original()
        .probs()
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .collect();
    if let Some(bad) = p.iter().find(|&&x| x < 1.0 / c) {
        return Err(Error::Precondition(format!(
            "lower bound inapplicable: p_i = {bad} < 1/C = {}",
            1.0 / c
        )));
    }
    let b = ctx.geom.b();
    let k = p.len() as f64;

    let mut sq = 0.0;
    let mut inner = 0.0;
    for &pi in &p {
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        for &pj in &p {
            sq += pi * pi / (pi + pj);
            s2 += pi * (1.0 - pi - pj) / ((pi + pj) * (pi + pj));
            for &pl in &p {
                s3 += pi / (pi + pj + pl - pj * pl);
            }
        }
        inner += pi * (s2 - (b - 1.0) / 2.0 * s3);
    }

    let terms = [
        term("1/B", 1.0 / b),
        term("k(2C-k)/(2C^2)", k * (2.0 * c - k) / (2.0 * c * c)),
        term("k(k-3C)/(2BC^2)", k * (k - 3.0 * c) / (2.0 * b * c * c)),
        term("-1/(2BC)", -1.0 / (2.0 * b * c)),
        term("-k/(2B^2 C)", -k / (2.0 * b * b * c)),
        term(
            "(B(k-C)+2C-3k)/(BC^2) * sum p_i^2/(p_i+p_j)",
            (b * (k - c) + 2.0 * c - 3.0 * k) / (b * c * c) * sq,
        ),
        term(
            "(B-1)^2/(B^3 C^2) * sum p_i [..]",
            (b - 1.0) * (b - 1.0) / (b * b * b * c * c) * inner,
        ),
    ];
    let mut r = BoundReport::new(Formula::Thm3, ctx.original().k(), n);
    let p_d = r.clamp(terms.iter().map(|t| t.value).sum());
    r.components.p_d = Some(p_d);
    r.rate = p_d;
    r.lower_total = Some(n as f64 * p_d + k);
    r.caveat = Some("O(e^-B) terms dropped".into());
    r.terms.extend(terms);
    Ok(r)
}

fn uniform_report(
    formula: Formula,
    geom: CacheGeometry,
    k: usize,
    n: u64,
    terms: Vec<Term>,
) -> BoundReport {
    let mut r = BoundReport::new(formula, k, n);
    let raw: f64 = terms.iter().map(|t| t.value).sum();
    r.rate = r.clamp(raw);
    r.terms = terms;
    let (b, kf, nf) = (geom.b(), k as f64, n as f64);
    match formula {
        Formula::Cor1 | Formula::Cor3a => r.upper_total = Some(nf * r.rate + kf * (1.0 + 1.0 / b)),
        Formula::Cor3b => r.upper_total = Some(nf * r.rate + kf * (1.0 + 1.0 / b) + 1.0),
        Formula::SeqCor => r.upper_total = Some(nf * r.rate + kf),
        Formula::Cor2 => r.lower_total = Some(nf * r.rate + kf),
        _ => unreachable!("not a uniform closed form"),
    }
    r
}

/// Uniform in-place upper bound: `1/B + k(B+5)/(2BC) + k/(B^2 C)` per round.
pub fn cor1(geom: CacheGeometry, k: usize, n: u64) -> BoundReport {
    let (b, c, kf) = (geom.b(), geom.c(), k as f64);
    uniform_report(
        Formula::Cor1,
        geom,
        k,
        n,
        vec![
            term("1/B", 1.0 / b),
            term("k(B+5)/(2BC)", kf * (b + 5.0) / (2.0 * b * c)),
            term("k/(B^2 C)", kf / (b * b * c)),
        ],
    )
}

/// Uniform in-place lower bound.
pub fn cor2(geom: CacheGeometry, k: usize, n: u64) -> Result<BoundReport> {
    let (b, c, kf) = (geom.b(), geom.c(), k as f64);
    if kf > c {
        return Err(Error::Precondition(format!(
            "lower bound inapplicable: p_i = 1/{k} < 1/C = 1/{c}"
        )));
    }
    let mut r = uniform_report(
        Formula::Cor2,
        geom,
        k,
        n,
        vec![
            term("1/B", 1.0 / b),
            term("k/(2C)", kf / (2.0 * c)),
            term("-k^2/(BC^2)", -kf * kf / (b * c * c)),
            term("-(k+1)/(2BC)", -(kf + 1.0) / (2.0 * b * c)),
            term("-k/(2B^2 C)", -kf / (2.0 * b * b * c)),
            term(
                "(B-1)^2/(12 B^3 C^2) * (k^2(5-2B) - 7k + 2)",
                (b - 1.0) * (b - 1.0) / (12.0 * b * b * b * c * c)
                    * (kf * kf * (5.0 - 2.0 * b) - 7.0 * kf + 2.0),
            ),
        ],
    );
    r.caveat = Some("O(e^-B) terms dropped".into());
    Ok(r)
}

/// Uniform out-of-place upper bound, short form:
/// `1/B + k(B+3)/(2BC) + k/(B^2 C) + k/(BC)`.
pub fn cor3a(geom: CacheGeometry, k: usize, n: u64) -> BoundReport {
    let (b, c, kf) = (geom.b(), geom.c(), k as f64);
    uniform_report(
        Formula::Cor3a,
        geom,
        k,
        n,
        vec![
            term("1/B", 1.0 / b),
            term("k(B+3)/(2BC)", kf * (b + 3.0) / (2.0 * b * c)),
            term("k/(B^2 C)", kf / (b * b * c)),
            term("k/(BC)", kf / (b * c)),
        ],
    )
}

/// Uniform out-of-place upper bound, long form,
/// which includes the source-array misses:
/// `2/B + k(B+7)/(2BC) + 2k/(B^2 C) + 2/C`.
pub fn cor3b(geom: CacheGeometry, k: usize, n: u64) -> BoundReport {
    let (b, c, kf) = (geom.b(), geom.c(), k as f64);
    uniform_report(
        Formula::Cor3b,
        geom,
        k,
        n,
        vec![
            term("2/B", 2.0 / b),
            term("k(B+7)/(2BC)", kf * (b + 7.0) / (2.0 * b * c)),
            term("2k/(B^2 C)", 2.0 * kf / (b * b * c)),
            term("2/C", 2.0 / c),
        ],
    )
}

/// Uniform sequence-access upper bound: `1/B + k(B+3)/(2BC)` per round.
pub fn seq_cor(geom: CacheGeometry, k: usize, n: u64) -> BoundReport {
    let (b, c, kf) = (geom.b(), geom.c(), k as f64);
    uniform_report(
        Formula::SeqCor,
        geom,
        k,
        n,
        vec![
            term("1/B", 1.0 / b),
            term("k(B+3)/(2BC)", kf * (b + 3.0) / (2.0 * b * c)),
        ],
    )
}

/// Upper bound on misses in the first permute pass of MSB radix sort over
/// `groups` groups of `per_group` equiprobable pointers (group `i` has total
/// probability `2^-i`). Logarithms are base 2.
pub fn msb_radix_bound(geom: CacheGeometry, groups: u64, per_group: u64, n: u64) -> Result<f64> {
    Ok(msb_radix_report(geom, groups, per_group, n)?
        .upper_total
        .expect("upper bound"))
}

pub fn msb_radix_report(
    geom: CacheGeometry,
    groups: u64,
    per_group: u64,
    n: u64,
) -> Result<BoundReport> {
    let (g, kk) = (groups, per_group);
    if g == 0 || kk == 0 || !g.is_power_of_two() || !kk.is_power_of_two() {
        return Err(Error::Precondition(format!(
            "g = {g} and K = {kk} must be powers of two >= 1"
        )));
    }
    if g.checked_mul(kk).is_none_or(|gk| gk > geom.capacity()) || kk > geom.num_blocks() {
        return Err(Error::Precondition(format!(
            "need gK <= CB = {} and K <= C = {}, got g = {g}, K = {kk}",
            geom.capacity(),
            geom.num_blocks()
        )));
    }
    let (b, c, kf) = (geom.b(), geom.c(), kk as f64);
    let bracket = [
        term("2.3B", 2.3 * b),
        term("2 log B", 2.0 * b.log2()),
        term("log C", c.log2()),
        term("-log K", -kf.log2()),
        term("0.7", 0.7),
    ];
    let scale = 2.0 * kf / (b * c);
    let mut r = BoundReport::new(Formula::Thm6, (g * kk) as usize, n);
    r.rate = 1.0 / b + scale * bracket.iter().map(|t| t.value).sum::<f64>();
    r.upper_total = Some(n as f64 * r.rate + (g * kk) as f64 * (1.0 + 1.0 / b));
    r.terms.push(term("1/B", 1.0 / b));
    r.terms.extend(
        bracket
            .into_iter()
            .map(|t| term(&format!("2K/(BC) * {}", t.name), scale * t.value)),
    );
    Ok(r)
}

/// Monte-Carlo settings for the exact expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    /// Sample paths per class (or count block).
    pub samples: usize,
    /// Absolute error allowed on a miss probability from cutting the series short.
    pub series_eps: f64,
    pub seed: u64,
}

impl Default for Estimator {
    fn default() -> Self {
        Self {
            samples: 10_000,
            series_eps: 1e-9,
            seed: 0,
        }
    }
}

/// Mean and variance of one `Pr[no conflict]` series, plus a bound on what
/// truncation dropped.
#[derive(Debug, Clone, Copy, Default)]
struct SeriesEstimate {
    mean: f64,
    var_of_mean: f64,
    truncation: f64,
}

/// Everything a sample path needs to know.
struct SeriesSpec<'a> {
    geom: CacheGeometry,
    /// Probability of the access whose return time is geometric.
    p: f64,
    /// Probabilities of the other balls (need not be normalized).
    others: &'a [f64],
    /// Multiply by `1 - g(mu)`.
    with_count_load: bool,
    /// Multiply by `f(m + 1)` for the source-array sweep.
    with_source: bool,
    /// Weight of this series in the final probability; scales the stopping rule.
    scale: f64,
    n: u64,
}

/// Estimates `sum_m p(1-p)^m E_{mu ~ phi(m, q)}[ h(mu) ]` where `h` is a
/// product of `f` terms (optionally times `1 - g` and `f(m+1)`).
///
/// Each sample path throws balls one at a time, so the prefix of length `m`
/// is a draw from `phi(m, q)` and a single path yields an unbiased estimate of
/// the whole series. A path stops once the summand can no longer matter: the
/// summand is non-increasing along a path, so everything after term `m` is at
/// most `v_m (1-p)^(m+1)`.
fn estimate_series(
    spec: &SeriesSpec<'_>,
    samples: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> SeriesEstimate {
    let geom = spec.geom;
    let p = spec.p;
    let q = 1.0 - p;
    let c = geom.c();
    let bsz = geom.block_size() as usize;
    let f = |x: u64| f_conflict(x, geom);

    let source = |m: u64| if spec.with_source { f(m + 1) } else { 1.0 };
    if q <= 0.0 || spec.others.iter().all(|&w| w <= 0.0) {
        // No other ball can fall between two consecutive accesses.
        return SeriesEstimate {
            mean: source(0),
            ..Default::default()
        };
    }

    let max_terms = {
        let denom = p.max(1.0 / spec.n.max(1) as f64);
        ((1.0 / eps).ln() / denom)
            .ceil()
            .min(MAX_SERIES_TERMS as f64) as u64
    };
    let alias = WeightedAliasIndex::new(spec.others.to_vec()).expect("non-negative weights");
    let k = spec.others.len();
    let mut counts = vec![0u64; k];
    let mut block_hit = vec![false; k.div_ceil(bsz)];
    let mut dirty: Vec<usize> = Vec::new();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut truncation: f64 = 0.0;
    for _ in 0..samples {
        for &j in &dirty {
            counts[j] = 0;
            block_hit[j / bsz] = false;
        }
        dirty.clear();

        let mut prod = 1.0;
        let mut touched = 0usize;
        let mut weight = p;
        let mut z = 0.0;
        let mut m = 0u64;
        loop {
            let v = (1.0 - touched as f64 / c) * prod * source(m);
            z += weight * v;
            let tail = v * weight / p * q;
            if v <= 0.0 || spec.scale * tail < eps || m >= max_terms {
                truncation = truncation.max(tail);
                break;
            }
            let j = alias.sample(rng);
            let old = counts[j];
            if old == 0 {
                dirty.push(j);
            }
            counts[j] = old + 1;
            let fo = f(old);
            let fnew = f(old + 1);
            prod = if fnew <= 0.0 { 0.0 } else { prod * fnew / fo };
            if spec.with_count_load && !block_hit[j / bsz] {
                block_hit[j / bsz] = true;
                touched += 1;
            }
            m += 1;
            weight *= q;
        }
        sum += z;
        sum_sq += z * z;
    }
    let s = samples as f64;
    let mean = sum / s;
    let var = if samples > 1 {
        ((sum_sq - s * mean * mean) / (s - 1.0)).max(0.0)
    } else {
        0.0
    };
    SeriesEstimate {
        mean,
        var_of_mean: var / s,
        truncation,
    }
}

fn class_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

struct ComponentEstimate {
    value: f64,
    var: f64,
    truncation: f64,
}

fn estimate_pointer_component(
    ctx: &OccupancyContext,
    n: u64,
    est: &Estimator,
    with_source: bool,
) -> ComponentEstimate {
    let geom = ctx.geom;
    let b = geom.b();
    let p = ctx.dist.probs();
    let active: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let symmetric = ctx.dist.is_uniform();
    let reps: &[usize] = if symmetric { &active[..1] } else { &active };

    let mut miss_sum = 0.0;
    let mut var = 0.0;
    let mut truncation = 0.0;
    for &i in reps {
        let others = ctx.a(i);
        let spec = SeriesSpec {
            geom,
            p: p[i],
            others: &others,
            with_count_load: true,
            with_source,
            scale: (b - 1.0) / b * p[i],
            n,
        };
        let mut rng = class_rng(est.seed, 2 * i as u64);
        let s = estimate_series(&spec, est.samples, est.series_eps, &mut rng);
        if symmetric {
            // Every class has the same series; weights sum to one.
            miss_sum = 1.0 - s.mean;
            var = s.var_of_mean;
            truncation = s.truncation;
        } else {
            miss_sum += p[i] * (1.0 - s.mean);
            var += p[i] * p[i] * s.var_of_mean;
            truncation += p[i] * s.truncation;
        }
    }
    let w = (b - 1.0) / b;
    ComponentEstimate {
        value: 1.0 / b + w * miss_sum,
        var: w * w * var,
        truncation: w * truncation,
    }
}

fn estimate_count_component(
    ctx: &OccupancyContext,
    n: u64,
    est: &Estimator,
    with_source: bool,
) -> ComponentEstimate {
    let geom = ctx.geom;
    let blocks = &ctx.blocks;
    let active: Vec<usize> = (0..blocks.len()).filter(|&i| blocks[i] > 0.0).collect();
    let symmetric = ctx.dist.is_uniform();
    let reps: &[usize] = if symmetric { &active[..1] } else { &active };

    let mut value = 0.0;
    let mut var = 0.0;
    let mut truncation = 0.0;
    for &i in reps {
        let others = ctx.b(i);
        let spec = SeriesSpec {
            geom,
            p: blocks[i],
            others: &others,
            with_count_load: false,
            with_source,
            scale: blocks[i],
            n,
        };
        let mut rng = class_rng(est.seed, 2 * i as u64 + 1);
        let s = estimate_series(&spec, est.samples, est.series_eps, &mut rng);
        if symmetric {
            value = 1.0 - s.mean;
            var = s.var_of_mean;
            truncation = s.truncation;
        } else {
            value += blocks[i] * (1.0 - s.mean);
            var += blocks[i] * blocks[i] * s.var_of_mean;
            truncation += blocks[i] * s.truncation;
        }
    }
    ComponentEstimate {
        value,
        var,
        truncation,
    }
}

fn exact(
    ctx: &OccupancyContext,
    n: u64,
    est: &Estimator,
    out_of_place: bool,
) -> Result<BoundReport> {
    ctx.require_in_place_shape()?;
    if est.samples == 0 || est.series_eps.is_nan() || est.series_eps <= 0.0 {
        return Err(Error::Precondition(
            "estimator needs samples >= 1 and eps > 0".into(),
        ));
    }
    let pd = estimate_pointer_component(ctx, n, est, out_of_place);
    let pc = estimate_count_component(ctx, n, est, out_of_place);
    let formula = if out_of_place {
        Formula::Thm4
    } else {
        Formula::Thm1
    };
    let mut r = BoundReport::new(formula, ctx.k(), n);
    let p_d = r.clamp(pd.value);
    let p_c = r.clamp(pc.value);
    let ps = out_of_place.then(|| p_s(ctx.geom));
    r.components = Components {
        p_c: Some(p_c),
        p_d: Some(p_d),
        p_s: ps,
    };
    r.rate = r.components.sum();
    let half = Z99 * (pd.var + pc.var).sqrt() + pd.truncation + pc.truncation;
    r.exact_estimate = Some(ExactEstimate {
        mean: r.rate,
        ci_halfwidth: half,
        samples: est.samples,
    });
    let (b, k) = (ctx.geom.b(), ctx.k() as f64);
    let extra = if out_of_place { 1.0 } else { 0.0 };
    r.lower_total = Some(n as f64 * r.rate);
    r.upper_total = Some(n as f64 * r.rate + k * (1.0 + 1.0 / b) + extra);
    r.terms = vec![term("p_c", p_c), term("p_d", p_d)];
    if let Some(ps) = ps {
        r.terms.push(term("p_s", ps));
    }
    r.terms.push(term("ci_halfwidth", half));
    r.terms
        .push(term("truncation", pd.truncation + pc.truncation));
    Ok(r)
}

/// Exact expected misses of the in-place process, estimated by Monte Carlo.
pub fn exact_inplace(ctx: &OccupancyContext, n: u64, est: &Estimator) -> Result<BoundReport> {
    exact(ctx, n, est, false)
}

/// Exact expected misses of the out-of-place process, estimated by Monte Carlo.
pub fn exact_outofplace(ctx: &OccupancyContext, n: u64, est: &Estimator) -> Result<BoundReport> {
    exact(ctx, n, est, true)
}

/// Cost model for trading misses against passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Cost of one cache miss, in units of per-key work.
    pub miss_penalty: f64,
    /// Work per key per pass.
    pub per_key_work: f64,
    /// Subproblem size at which recursion stops.
    pub threshold: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            miss_penalty: 30.0,
            per_key_work: 1.0,
            threshold: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    /// Each pass (count plus permute) may cost at most `(2 + eps) n / B` misses.
    StrictMisses(f64),
    TradeOff(CostModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistKind {
    Uniform,
    /// First MSB pass over floats: `groups` exponent groups, geometric weights.
    FloatModel {
        groups: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KChoice {
    /// Total number of classes.
    pub k: u64,
    /// Pointers per exponent group (`k` itself for uniform keys).
    pub per_group: u64,
    /// Predicted misses per key for one pass (count plus permute).
    pub predicted_misses_per_key: f64,
    /// False when no candidate met the criterion and the fallback was returned.
    pub feasible: bool,
}

fn prev_power_of_two(x: u64) -> u64 {
    if x == 0 {
        0
    } else {
        1 << (63 - x.leading_zeros())
    }
}

/// Passes of fan-out `fanout` needed to cut `n` keys down to `threshold`.
pub fn passes(n: u64, fanout: u64, threshold: u64) -> u32 {
    if fanout < 2 || n <= threshold.max(1) {
        return 1;
    }
    let ratio = n as f64 / threshold.max(1) as f64;
    (ratio.ln() / (fanout as f64).ln()).ceil().max(1.0) as u32
}

/// Picks the number of classes for one distribution pass.
///
/// Candidates are powers of two up to `min(n/8, max_k)` (and `B*C` so the
/// count array fits in cache). The count phase is charged a sequential scan,
/// `1/B` per key; the permute phase is charged the applicable upper bound:
/// the uniform in-place bound for uniform keys, the MSB first-pass bound for
/// the float model.
pub fn choose_k(
    geom: CacheGeometry,
    n: u64,
    criterion: Criterion,
    kind: DistKind,
    max_k: u64,
) -> KChoice {
    let b = geom.b();
    let cap = prev_power_of_two((n / 8).min(max_k).min(geom.capacity())).max(2);

    // (k, K, predicted misses per key, fan-out of the largest class)
    let candidates: Vec<(u64, u64, f64, u64)> = match kind {
        DistKind::Uniform => std::iter::successors(Some(2u64), |k| Some(k * 2))
            .take_while(|&k| k <= cap)
            .map(|k| (k, k, 1.0 / b + cor1(geom, k as usize, n).rate, k))
            .collect(),
        DistKind::FloatModel { groups } => std::iter::successors(Some(1u64), |kk| Some(kk * 2))
            .take_while(|&kk| kk <= geom.num_blocks() && groups * kk <= cap.max(groups))
            .filter_map(|kk| {
                let total = msb_radix_bound(geom, groups, kk, n).ok()?;
                Some((groups * kk, kk, 1.0 / b + total / n.max(1) as f64, 2 * kk))
            })
            .collect(),
    };

    let fallback = || {
        let (k, per_group) = match kind {
            DistKind::Uniform => (geom.block_size(), geom.block_size()),
            DistKind::FloatModel { groups } => (groups, 1),
        };
        KChoice {
            k,
            per_group,
            predicted_misses_per_key: f64::NAN,
            feasible: false,
        }
    };

    let best = match criterion {
        Criterion::StrictMisses(eps) => candidates
            .iter()
            .filter(|c| c.2 <= (2.0 + eps) / b)
            .max_by_key(|c| c.0),
        Criterion::TradeOff(cost) => candidates.iter().min_by(|x, y| {
            let cost_of = |c: &(u64, u64, f64, u64)| {
                passes(n, c.3, cost.threshold) as f64
                    * (cost.miss_penalty * c.2 + cost.per_key_work)
            };
            cost_of(x).total_cmp(&cost_of(y))
        }),
    };
    match best {
        Some(&(k, per_group, misses, _)) => KChoice {
            k,
            per_group,
            predicted_misses_per_key: misses,
            feasible: true,
        },
        None => fallback(),
    }
}
