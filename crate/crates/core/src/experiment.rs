//! Seeded experiment runs producing CSV rows: process simulations, formula
//! predictions, their comparison, and sorting benchmarks.
//!
//! Simulations and predictions share one row schema so that comparing them is
//! a join on the parameter columns.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cor1, cor2, cor3a, cor3b, exact_inplace, exact_outofplace, lower_inplace, msb_radix_report,
    seq_cor, upper_inplace, upper_outofplace, upper_sequences, BoundReport, BoundRole, Estimator,
    Formula, OccupancyContext,
};
use crate::cache_sim::{
    CacheGeometry, MissStats, ModelOnly, NoProbe, Probe, Simulator, Tag, TagStats,
};
use crate::dist::ClassDistribution;
use crate::dist_sort::{count_phase, permute_in_place_probed, Classifier, SortLayout};
use crate::error::{Error, Result};
use crate::process::{run_process, seeded_rng, ProcessParams, Variant};
use crate::radix_float::{
    float_to_ordered_word, model_floats, naive_sort_words_probed, sort_words_probed,
    ExponentDistribution, FloatFormat, FloatKey, NaivePlan, RadixPlan, SortReport,
};

/// Named cache geometries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// B = 8, C = 8192.
    PaperL2,
    /// B = 8, C = 128.
    Tiny,
}

impl Preset {
    pub fn geometry(self) -> CacheGeometry {
        match self {
            Preset::PaperL2 => CacheGeometry::paper_l2(),
            Preset::Tiny => CacheGeometry::tiny(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "paper-l2" | "paper_l2" | "l2" => Ok(Preset::PaperL2),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(format!("unknown preset `{s}` (expected paper-L2 or tiny)")),
        }
    }
}

/// Where class probabilities come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistSpec {
    Uniform(usize),
    /// `p_i` proportional to `2^-i`.
    Geometric(usize),
    /// First MSB pass over model floats: `2^e'` groups of `2^m'` classes.
    FloatModel {
        e_prime: u32,
        m_prime: u32,
    },
    /// Explicit weights, normalized.
    Explicit(Vec<f64>),
}

impl DistSpec {
    /// Reads whitespace- or comma-separated weights.
    pub fn from_weights_text(text: &str) -> Result<Self> {
        let weights = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Distribution(format!("bad weight `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ClassDistribution::from_weights(&weights)?;
        Ok(DistSpec::Explicit(weights))
    }

    pub fn k(&self) -> usize {
        match self {
            DistSpec::Uniform(k) | DistSpec::Geometric(k) => *k,
            DistSpec::FloatModel { e_prime, m_prime } => 1 << (e_prime + m_prime),
            DistSpec::Explicit(w) => w.len(),
        }
    }

    pub fn class_distribution(&self) -> Result<ClassDistribution> {
        match self {
            DistSpec::Uniform(k) => ClassDistribution::uniform(*k),
            DistSpec::Geometric(k) => ClassDistribution::geometric(*k),
            DistSpec::FloatModel { e_prime, m_prime } => {
                ExponentDistribution::new(FloatFormat::F32, 1 << e_prime, 1 << m_prime)?
                    .class_distribution()
            }
            DistSpec::Explicit(w) => ClassDistribution::from_weights(w),
        }
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistSpec::Uniform(k) => write!(f, "uniform:{k}"),
            DistSpec::Geometric(k) => write!(f, "geometric:{k}"),
            DistSpec::FloatModel { e_prime, m_prime } => write!(f, "float:{e_prime}:{m_prime}"),
            DistSpec::Explicit(w) => write!(f, "explicit:{}", w.len()),
        }
    }
}

impl FromStr for DistSpec {
    type Err = String;

    /// `uniform:K`, `geometric:K` or `float:E:M`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| {
            x.parse::<u32>()
                .map_err(|e| format!("bad number `{x}` in `{s}`: {e}"))
        };
        match parts.as_slice() {
            ["uniform", k] => Ok(DistSpec::Uniform(num(k)? as usize)),
            ["geometric", k] => Ok(DistSpec::Geometric(num(k)? as usize)),
            ["float", e, m] => Ok(DistSpec::FloatModel {
                e_prime: num(e)?,
                m_prime: num(m)?,
            }),
            _ => Err(format!(
                "unknown distribution `{s}` (expected uniform:K, geometric:K or float:E:M)"
            )),
        }
    }
}

/// What `simulate` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimVariant {
    Process(Variant),
    /// The instrumented in-place permute (or the first radix pass for the
    /// float model) fed through the simulator.
    SortTrace,
}

impl SimVariant {
    pub fn name(self) -> &'static str {
        match self {
            SimVariant::Process(v) => v.name(),
            SimVariant::SortTrace => "sort-trace",
        }
    }

    /// Formulas that bound or estimate this variant's misses.
    pub fn formulas(self, dist: &DistSpec) -> &'static [Formula] {
        use Formula::*;
        match (self, dist) {
            (SimVariant::SortTrace, DistSpec::FloatModel { .. }) => &[Thm6],
            (SimVariant::Process(Variant::InPlace), _) | (SimVariant::SortTrace, _) => {
                &[Thm1, Thm2, Thm3, Cor1, Cor2]
            }
            // cor3a leaves out the source sweep, so it does not bound this process.
            (SimVariant::Process(Variant::OutOfPlace), _) => &[Thm3, Thm4, Thm5, Cor2, Cor3b],
            (SimVariant::Process(Variant::Sequences), _) => &[Seq, SeqCor, Thm3],
        }
    }
}

impl fmt::Display for SimVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sort-trace" | "sorttrace" => Ok(SimVariant::SortTrace),
            other => other
                .parse::<Variant>()
                .map(SimVariant::Process)
                .map_err(|_| {
                    format!("unknown variant `{s}` (inplace, outofplace, sequences, sort-trace)")
                }),
        }
    }
}

/// One CSV record. Totals are over `n_rounds` rounds; rates are misses per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// `sim` or `pred`.
    pub source: String,
    pub variant: String,
    pub formula: String,
    pub dist: String,
    pub block_words: u64,
    pub cache_blocks: u64,
    pub k_classes: usize,
    pub n_rounds: u64,
    pub seed: Option<u64>,
    pub tag: String,
    pub accesses_total: Option<u64>,
    pub misses_total: Option<u64>,
    pub compulsory_misses_total: Option<u64>,
    pub conflict_misses_total: Option<u64>,
    pub rate_misses_per_round: Option<f64>,
    pub lower_misses_total: Option<f64>,
    pub upper_misses_total: Option<f64>,
    pub ci99_halfwidth_per_round: Option<f64>,
    pub note: String,
}

impl Row {
    fn blank(source: &str, geom: CacheGeometry, dist: &DistSpec, n: u64) -> Self {
        Self {
            source: source.into(),
            variant: String::new(),
            formula: String::new(),
            dist: dist.to_string(),
            block_words: geom.block_size(),
            cache_blocks: geom.num_blocks(),
            k_classes: dist.k(),
            n_rounds: n,
            seed: None,
            tag: String::new(),
            accesses_total: None,
            misses_total: None,
            compulsory_misses_total: None,
            conflict_misses_total: None,
            rate_misses_per_round: None,
            lower_misses_total: None,
            upper_misses_total: None,
            ci99_halfwidth_per_round: None,
            note: String::new(),
        }
    }

    fn point(&self) -> PointKey {
        PointKey {
            dist: self.dist.clone(),
            block_words: self.block_words,
            cache_blocks: self.cache_blocks,
            k_classes: self.k_classes,
            n_rounds: self.n_rounds,
        }
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Parameters of a simulation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub variant: SimVariant,
    pub geom: CacheGeometry,
    pub dist: DistSpec,
    pub n: u64,
    pub seeds: Vec<u64>,
}

fn sim_rows(spec: &SimSpec, seed: u64, stats: &MissStats, tags: &[Tag]) -> Vec<Row> {
    tags.iter()
        .map(|&tag| {
            let s = stats.sum_of(&[tag]);
            let mut row = Row::blank("sim", spec.geom, &spec.dist, spec.n);
            row.variant = spec.variant.name().into();
            row.seed = Some(seed);
            row.tag = tag.family_name().into();
            row.accesses_total = Some(s.accesses);
            row.misses_total = Some(s.misses);
            row.compulsory_misses_total = Some(s.compulsory_misses);
            row.conflict_misses_total = Some(s.conflict_misses);
            row.rate_misses_per_round = Some(if spec.n == 0 {
                0.0
            } else {
                s.misses as f64 / spec.n as f64
            });
            row
        })
        .collect()
}

fn simulate_one(spec: &SimSpec, seed: u64) -> Result<Vec<Row>> {
    match spec.variant {
        SimVariant::Process(variant) => {
            let params = ProcessParams::new(
                spec.dist.class_distribution()?,
                spec.n,
                spec.geom,
                seed,
                variant,
            )?;
            let report = run_process(&params)?;
            Ok(sim_rows(spec, seed, &report.stats, &report.tag_families()))
        }
        SimVariant::SortTrace => {
            let stats = match spec.dist {
                DistSpec::FloatModel { e_prime, m_prime } => {
                    first_permute_stats(spec.geom, spec.n as usize, seed, Some((e_prime, m_prime)))?
                        .0
                }
                _ => traced_class_permute(
                    spec.geom,
                    &spec.dist.class_distribution()?,
                    spec.n as usize,
                    seed,
                )?,
            };
            Ok(sim_rows(spec, seed, &stats, &[Tag::Count, Tag::Data]))
        }
    }
}

/// Runs every seed (in parallel) and returns rows in seed order, one per
/// seed and tag.
pub fn simulate(spec: &SimSpec) -> Result<Vec<Row>> {
    let per_seed: Vec<Result<Vec<Row>>> = spec
        .seeds
        .par_iter()
        .map(|&s| simulate_one(spec, s))
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(rows)
}

/// In-place permute of `n` keys whose classes are drawn from `dist`, with a
/// randomized layout; only the modelled accesses reach the simulator.
pub fn traced_class_permute(
    geom: CacheGeometry,
    dist: &ClassDistribution,
    n: usize,
    seed: u64,
) -> Result<MissStats> {
    let mut rng = seeded_rng(seed);
    let k = dist.k();
    let sampler = WeightedAliasIndex::new(dist.probs().to_vec())
        .map_err(|e| Error::Distribution(e.to_string()))?;
    let mut data: Vec<u64> = (0..n).map(|_| sampler.sample(&mut rng) as u64).collect();
    let cls = Classifier::identity(k);
    let layout = SortLayout::randomized(geom, n, k, &mut rng);
    let counts = count_phase(&data, &cls)?;
    let mut sim = Simulator::new(geom, layout.address_space)?;
    permute_in_place_probed(&mut data, counts, &cls, &layout, &mut ModelOnly(&mut sim))?;
    if let Some(e) = sim.take_error() {
        return Err(e);
    }
    Ok(sim.stats())
}

/// Simulates only the modelled accesses of the first permute pass.
struct FirstPermute<'a> {
    sim: &'a mut Simulator,
    permutes_seen: u32,
    active: bool,
}

impl Probe for FirstPermute<'_> {
    #[inline]
    fn touch(&mut self, tag: Tag, address: u64) {
        if self.active && tag != Tag::Other {
            self.sim.touch(tag, address);
        }
    }

    fn phase(&mut self, label: &'static str) {
        if label == "permute" {
            self.permutes_seen += 1;
        }
        self.active = label == "permute" && self.permutes_seen == 1;
    }
}

/// Result of tracing the first radix pass of a float sort.
#[derive(Debug, Clone)]
pub struct FirstPassRun {
    pub plan: RadixPlan,
    pub report: SortReport,
    /// Keys that went through the first pass.
    pub pass_keys: u64,
}

fn sort_layout<R: Rng>(geom: CacheGeometry, n: usize, plan: &RadixPlan, rng: &mut R) -> SortLayout {
    let k = (plan.groups * plan.group_width).max(1 << plan.max_radix_bits) as usize;
    SortLayout::randomized(geom, n, k, rng)
}

/// Sorts `n` model floats under the automatic plan (or one with the given
/// `(e', m')`), simulating the first permute pass from a cold cache.
pub fn first_permute_stats(
    geom: CacheGeometry,
    n: usize,
    seed: u64,
    first_pass: Option<(u32, u32)>,
) -> Result<(MissStats, FirstPassRun)> {
    let mut rng = seeded_rng(seed);
    let keys: Vec<f32> = model_floats(&mut rng, n);
    let mut plan = RadixPlan::auto(n, FloatFormat::F32, geom);
    if let Some((e_prime, m_prime)) = first_pass {
        plan.e_prime = e_prime;
        plan.groups = 1 << e_prime;
        plan.m_prime = m_prime;
        plan.group_width = 1 << m_prime;
        plan.theta = 0.5f64.powi(1 << e_prime);
    }
    let mut words: Vec<u64> = keys.iter().map(|k| k.raw_bits()).collect();
    let layout = sort_layout(geom, n, &plan, &mut rng);
    let mut sim = Simulator::new(geom, layout.address_space)?;
    let mut probe = FirstPermute {
        sim: &mut sim,
        permutes_seen: 0,
        active: false,
    };
    let report = sort_words_probed(&mut words, &plan, &layout, &mut probe)?;
    if let Some(e) = sim.take_error() {
        return Err(e);
    }
    let pass_keys = (n - report.small) as u64;
    Ok((
        sim.stats(),
        FirstPassRun {
            plan,
            report,
            pass_keys,
        },
    ))
}

fn uniform_only(dist: &DistSpec, formula: Formula) -> Result<usize> {
    match dist {
        DistSpec::Uniform(k) => Ok(*k),
        _ => Err(Error::Precondition(format!(
            "{formula} needs a uniform distribution"
        ))),
    }
}

/// Evaluates one formula for the given parameters.
pub fn evaluate(
    formula: Formula,
    geom: CacheGeometry,
    dist: &DistSpec,
    n: u64,
    est: &Estimator,
) -> Result<BoundReport> {
    let ctx = || -> Result<OccupancyContext> {
        Ok(OccupancyContext::new(geom, dist.class_distribution()?))
    };
    match formula {
        Formula::Thm1 => exact_inplace(&ctx()?, n, est),
        Formula::Thm2 => upper_inplace(&ctx()?, n),
        Formula::Thm3 => lower_inplace(&ctx()?, n),
        Formula::Thm4 => exact_outofplace(&ctx()?, n, est),
        Formula::Thm5 => upper_outofplace(&ctx()?, n),
        Formula::Seq => upper_sequences(&ctx()?, n),
        Formula::Cor1 => Ok(cor1(geom, uniform_only(dist, formula)?, n)),
        Formula::Cor2 => cor2(geom, uniform_only(dist, formula)?, n),
        Formula::Cor3a => Ok(cor3a(geom, uniform_only(dist, formula)?, n)),
        Formula::Cor3b => Ok(cor3b(geom, uniform_only(dist, formula)?, n)),
        Formula::SeqCor => Ok(seq_cor(geom, uniform_only(dist, formula)?, n)),
        Formula::Thm6 => match dist {
            DistSpec::FloatModel { e_prime, m_prime } => {
                msb_radix_report(geom, 1 << e_prime, 1 << m_prime, n)
            }
            _ => Err(Error::Precondition(
                "thm6 needs a float:E:M distribution".into(),
            )),
        },
    }
}

/// Prediction rows for one formula: a `TOTAL` row plus one row per component.
/// Precondition failures become a single row with the reason in `note`.
pub fn predict_rows(
    formula: Formula,
    geom: CacheGeometry,
    dist: &DistSpec,
    n: u64,
    est: &Estimator,
) -> Vec<Row> {
    let mut total = Row::blank("pred", geom, dist, n);
    total.formula = formula.name().into();
    total.tag = "TOTAL".into();
    let report = match evaluate(formula, geom, dist, n, est) {
        Ok(r) => r,
        Err(e) => {
            total.note = format!("inapplicable: {e}");
            return vec![total];
        }
    };
    total.rate_misses_per_round = Some(report.rate.min(1.0));
    total.lower_misses_total = report.lower_total;
    total.upper_misses_total = report.upper_total;
    total.ci99_halfwidth_per_round = report.exact_estimate.map(|e| e.ci_halfwidth);
    let mut notes = Vec::new();
    if report.rate > 1.0 {
        notes.push(format!("vacuous: {:.4} misses per round", report.rate));
    }
    if report.clamped {
        notes.push("component clamped to [0,1]".to_string());
    }
    if let Some(c) = &report.caveat {
        notes.push(c.clone());
    }
    total.note = notes.join("; ");

    let pointer_tag = if matches!(formula, Formula::Thm4 | Formula::Thm5) {
        "DEST"
    } else if matches!(formula, Formula::Seq) {
        "SEQ"
    } else {
        "DATA"
    };
    let mut rows = vec![total.clone()];
    for (tag, value) in [
        ("COUNT", report.components.p_c),
        (pointer_tag, report.components.p_d),
        ("SRC", report.components.p_s),
    ] {
        if let Some(v) = value {
            let mut r = total.clone();
            r.tag = tag.into();
            r.rate_misses_per_round = Some(v);
            r.lower_misses_total = None;
            r.upper_misses_total = None;
            r.ci99_halfwidth_per_round = None;
            r.note = String::new();
            rows.push(r);
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct PointKey {
    dist: String,
    block_words: u64,
    cache_blocks: u64,
    k_classes: usize,
    n_rounds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

/// One prediction checked against the simulated runs at its parameter point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub formula: Formula,
    pub role: BoundRole,
    /// Predicted misses per round (the bound, or the exact estimate).
    pub predicted_rate: f64,
    pub verdict: Verdict,
}

/// Empirical misses per round at one parameter point, with every check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparePoint {
    pub variant: String,
    pub dist: String,
    pub block_words: u64,
    pub cache_blocks: u64,
    pub k_classes: usize,
    pub n_rounds: u64,
    pub seeds: usize,
    pub mean_rate: f64,
    pub stderr_rate: f64,
    pub checks: Vec<Check>,
}

impl ComparePoint {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict == Verdict::Pass)
    }
}

/// Mean and standard error of per-seed values.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

const Z99: f64 = 2.575_829_303_548_901;

/// Per-seed total miss rates (all tags summed) of the simulation rows.
fn per_seed_rates(rows: &[&Row]) -> Vec<f64> {
    let mut by_seed: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for r in rows {
        let e = by_seed.entry(r.seed.unwrap_or(0)).or_default();
        e.0 += r.misses_total.unwrap_or(0);
        e.1 = r.n_rounds;
    }
    by_seed
        .values()
        .map(|&(m, n)| if n == 0 { 0.0 } else { m as f64 / n as f64 })
        .collect()
}

/// Joins simulation and prediction rows on their parameters and checks each
/// prediction: upper bounds must not be exceeded by more than 3 standard
/// errors, lower bounds not undercut by more, and exact estimates must agree
/// within 2% or within the combined 99% intervals. Predictions of formulas
/// that do not apply to a point's variant are ignored; predictions whose
/// parameters match no simulated point are an error.
pub fn compare(rows: &[Row]) -> Result<Vec<ComparePoint>> {
    let mut sims: BTreeMap<(PointKey, String), Vec<&Row>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.source == "sim") {
        sims.entry((r.point(), r.variant.clone()))
            .or_default()
            .push(r);
    }
    let preds: Vec<&Row> = rows
        .iter()
        .filter(|r| r.source == "pred" && r.tag == "TOTAL")
        .collect();

    let mut out = Vec::new();
    let mut matched = vec![false; preds.len()];
    for ((point, variant), group) in &sims {
        let sim_variant: SimVariant = variant.parse().map_err(Error::Params)?;
        let dist: Option<DistSpec> = point.dist.parse().ok();
        let rates = per_seed_rates(group);
        let (mean, se) = mean_stderr(&rates);
        let n = point.n_rounds.max(1) as f64;
        let mut checks = Vec::new();
        for (i, p) in preds.iter().enumerate() {
            if p.point() != *point {
                continue;
            }
            matched[i] = true;
            let formula: Formula = p.formula.parse().map_err(Error::Params)?;
            let applicable = match &dist {
                Some(d) => sim_variant.formulas(d).contains(&formula),
                None => sim_variant
                    .formulas(&DistSpec::Explicit(vec![]))
                    .contains(&formula),
            };
            if !applicable {
                continue;
            }
            let Some(rate) = p.rate_misses_per_round else {
                continue;
            };
            let role = formula.role();
            let ok = match role {
                BoundRole::Upper => mean <= p.upper_misses_total.unwrap_or(rate * n) / n + 3.0 * se,
                BoundRole::Lower => mean >= p.lower_misses_total.unwrap_or(rate * n) / n - 3.0 * se,
                BoundRole::Exact => {
                    let ci = p.ci99_halfwidth_per_round.unwrap_or(0.0);
                    (mean - rate).abs() <= 0.02 * rate || (mean - rate).abs() <= Z99 * se + ci
                }
            };
            checks.push(Check {
                formula,
                role,
                predicted_rate: match role {
                    BoundRole::Upper => p.upper_misses_total.unwrap_or(rate * n) / n,
                    BoundRole::Lower => p.lower_misses_total.unwrap_or(rate * n) / n,
                    BoundRole::Exact => rate,
                },
                verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            });
        }
        out.push(ComparePoint {
            variant: variant.clone(),
            dist: point.dist.clone(),
            block_words: point.block_words,
            cache_blocks: point.cache_blocks,
            k_classes: point.k_classes,
            n_rounds: point.n_rounds,
            seeds: rates.len(),
            mean_rate: mean,
            stderr_rate: se,
            checks,
        });
    }
    if let Some(i) = matched.iter().position(|m| !m) {
        let p = preds[i];
        return Err(Error::Params(format!(
            "prediction {} for {} B={} C={} k={} n={} matches no simulated parameter point",
            p.formula, p.dist, p.block_words, p.cache_blocks, p.k_classes, p.n_rounds
        )));
    }
    Ok(out)
}

/// Renders comparison results as a Markdown table.
pub fn compare_table(points: &[ComparePoint]) -> String {
    let mut s = String::from(
        "| variant | dist | B | C | k | n | seeds | mean misses/round | stderr | check | predicted | verdict |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for p in points {
        let lead = format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:.6} | {:.6} |",
            p.variant,
            p.dist,
            p.block_words,
            p.cache_blocks,
            p.k_classes,
            p.n_rounds,
            p.seeds,
            p.mean_rate,
            p.stderr_rate
        );
        if p.checks.is_empty() {
            s.push_str(&format!("{lead} - | - | - |\n"));
        }
        for c in &p.checks {
            let role = match c.role {
                BoundRole::Lower => "lower",
                BoundRole::Upper => "upper",
                BoundRole::Exact => "exact",
            };
            s.push_str(&format!(
                "{lead} {} ({role}) | {:.6} | {} |\n",
                c.formula, c.predicted_rate, c.verdict
            ));
        }
    }
    s
}

/// Misses attributed to each phase of each pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PhaseRow {
    pub plan: String,
    /// Distribution pass the phase belongs to (0 before the first pass).
    pub pass: u32,
    pub phase: String,
    pub accesses_total: u64,
    pub misses_total: u64,
}

/// Feeds every access to one simulator and splits its counters by phase.
pub struct PhaseProbe {
    sim: Simulator,
    pass: u32,
    phase: &'static str,
    mark: TagStats,
    totals: BTreeMap<(u32, &'static str), TagStats>,
}

impl PhaseProbe {
    pub fn new(sim: Simulator) -> Self {
        Self {
            sim,
            pass: 0,
            phase: "start",
            mark: TagStats::default(),
            totals: BTreeMap::new(),
        }
    }

    fn flush(&mut self) {
        let now = self.sim.totals();
        let delta = TagStats {
            accesses: now.accesses - self.mark.accesses,
            misses: now.misses - self.mark.misses,
            compulsory_misses: now.compulsory_misses - self.mark.compulsory_misses,
            conflict_misses: now.conflict_misses - self.mark.conflict_misses,
        };
        if delta.accesses > 0 {
            self.totals
                .entry((self.pass, self.phase))
                .or_default()
                .merge(&delta);
        }
        self.mark = now;
    }

    pub fn finish(mut self, plan: &str) -> Result<(Vec<PhaseRow>, TagStats)> {
        self.flush();
        if let Some(e) = self.sim.take_error() {
            return Err(e);
        }
        let rows = self
            .totals
            .iter()
            .map(|(&(pass, phase), s)| PhaseRow {
                plan: plan.into(),
                pass,
                phase: phase.into(),
                accesses_total: s.accesses,
                misses_total: s.misses,
            })
            .collect();
        Ok((rows, self.sim.totals()))
    }
}

impl Probe for PhaseProbe {
    #[inline]
    fn touch(&mut self, tag: Tag, address: u64) {
        self.sim.touch(tag, address);
    }

    fn phase(&mut self, label: &'static str) {
        self.flush();
        if label == "count" {
            self.pass += 1;
        }
        self.phase = label;
    }
}

/// Outcome of sorting one key set with one plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub plan: String,
    pub correct: bool,
    pub misses_total: u64,
    pub accesses_total: u64,
    pub phases: Vec<PhaseRow>,
    pub report: SortReport,
    /// Local wall-clock time of an uninstrumented run; not reproducible.
    pub wall_seconds: f64,
}

enum BenchPlan {
    Tuned(RadixPlan),
    Naive(NaivePlan),
}

impl BenchPlan {
    fn name(&self) -> &'static str {
        match self {
            BenchPlan::Tuned(_) => "tuned",
            BenchPlan::Naive(_) => "naive",
        }
    }

    fn run<P: Probe>(
        &self,
        words: &mut [u64],
        layout: &SortLayout,
        probe: &mut P,
    ) -> Result<SortReport> {
        match self {
            BenchPlan::Tuned(p) => sort_words_probed(words, p, layout, probe),
            BenchPlan::Naive(p) => naive_sort_words_probed(words, p, layout, probe),
        }
    }
}

fn traced_run(
    words: &[u64],
    reference: &[u64],
    plan: BenchPlan,
    geom: CacheGeometry,
    seed: u64,
) -> Result<BenchRun> {
    let n = words.len();
    let mut rng = seeded_rng(seed);
    let layout = match &plan {
        BenchPlan::Tuned(p) => sort_layout(geom, n, p, &mut rng),
        BenchPlan::Naive(p) => SortLayout::randomized(geom, n, 1 << p.radix_bits, &mut rng),
    };

    let mut probe = PhaseProbe::new(Simulator::new(geom, layout.address_space)?);
    let mut traced = words.to_vec();
    let report = plan.run(&mut traced, &layout, &mut probe)?;
    let (phases, totals) = probe.finish(plan.name())?;

    let mut timed = words.to_vec();
    let start = Instant::now();
    plan.run(&mut timed, &layout, &mut NoProbe)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    Ok(BenchRun {
        plan: plan.name().into(),
        correct: traced == reference && timed == reference,
        misses_total: totals.misses,
        accesses_total: totals.accesses,
        phases,
        report,
        wall_seconds,
    })
}

/// Sorts `keys` with the tuned plan and, if asked, the single-pass baseline,
/// simulating every memory access of each. `theta` overrides the tuned
/// plan's split point.
pub fn sortbench<F: FloatKey>(
    keys: &[F],
    geom: CacheGeometry,
    seed: u64,
    theta: Option<f64>,
    with_naive: bool,
) -> Result<Vec<BenchRun>> {
    let words: Vec<u64> = keys
        .iter()
        .map(|&k| float_to_ordered_word(k))
        .collect::<Result<_>>()?;
    let mut reference = words.clone();
    reference.sort_unstable();
    let n = words.len();
    let mut runs = vec![traced_run(
        &words,
        &reference,
        BenchPlan::Tuned(match theta {
            Some(t) => RadixPlan::with_theta(n, F::FORMAT, geom, t)?,
            None => RadixPlan::auto(n, F::FORMAT, geom),
        }),
        geom,
        seed,
    )?];
    if with_naive {
        let plan = BenchPlan::Naive(NaivePlan::new(n, F::FORMAT));
        runs.push(traced_run(&words, &reference, plan, geom, seed)?);
    }
    Ok(runs)
}

/// Writes the per-phase rows of every run as CSV.
pub fn write_phase_rows<W: Write>(out: W, runs: &[BenchRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in runs.iter().flat_map(|r| &r.phases) {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Model floats for benchmarks and key files.
pub fn generate_keys<F: FloatKey>(n: usize, seed: u64) -> Vec<F> {
    model_floats(&mut seeded_rng(seed), n)
}
