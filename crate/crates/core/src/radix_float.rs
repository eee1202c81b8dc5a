//! MSB radix sort for uniformly distributed floats in `[0, 1)`.
//!
//! Non-negative IEEE floats order the same way as their bit patterns, so the
//! sort works on words. Uniform floats are far from uniform as words: half of
//! them have unbiased exponent -1, a quarter -2, and so on. The sort therefore
//!
//! 1. moves keys below a threshold `theta` to the front and quicksorts them;
//! 2. runs one distribution pass over the rest whose classes are the low `e'`
//!    exponent bits (the only ones that still vary) followed by `m'` mantissa
//!    bits;
//! 3. recurses on each class with `ceil(log2(size) - 3)` further mantissa
//!    bits, finishing classes of at most 8 keys with insertion sort.

use std::fmt;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{choose_k, msb_radix_bound, Criterion, DistKind};
use crate::cache_sim::{CacheGeometry, NoProbe, Probe, Tag};
use crate::dist::ClassDistribution;
use crate::dist_sort::{
    count_phase_probed, permute_in_place_probed, permute_out_of_place_probed, Classifier,
    PermuteKind, SortLayout,
};
use crate::error::{Error, Result};

/// Exponent and mantissa widths of a binary floating-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatFormat {
    pub e: u32,
    pub m: u32,
}

impl FloatFormat {
    pub const F32: FloatFormat = FloatFormat { e: 8, m: 23 };
    pub const F64: FloatFormat = FloatFormat { e: 11, m: 52 };

    pub fn new(e: u32, m: u32) -> Result<Self> {
        match (e, m) {
            (8, 23) => Ok(Self::F32),
            (11, 52) => Ok(Self::F64),
            _ => Err(Error::Precondition(format!(
                "unsupported float format e={e}, m={m}"
            ))),
        }
    }

    pub fn bias(self) -> u64 {
        (1 << (self.e - 1)) - 1
    }

    /// Sign, exponent and mantissa bits.
    pub fn word_bits(self) -> u32 {
        1 + self.e + self.m
    }

    /// Unbiased exponent of a non-zero word.
    pub fn unbiased_exponent(self, word: u64) -> i64 {
        (word >> self.m) as i64 - self.bias() as i64
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e={} m={}", self.e, self.m)
    }
}

/// A float type the sort accepts.
pub trait FloatKey: Copy + PartialOrd + fmt::Debug + Send + Sync + 'static {
    const FORMAT: FloatFormat;
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
    fn raw_bits(self) -> u64;
    fn from_word(word: u64) -> Self;
}

impl FloatKey for f32 {
    const FORMAT: FloatFormat = FloatFormat::F32;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn raw_bits(self) -> u64 {
        self.to_bits() as u64
    }

    fn from_word(word: u64) -> Self {
        f32::from_bits(word as u32)
    }
}

impl FloatKey for f64 {
    const FORMAT: FloatFormat = FloatFormat::F64;

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn raw_bits(self) -> u64 {
        self.to_bits()
    }

    fn from_word(word: u64) -> Self {
        f64::from_bits(word)
    }
}

/// Bit pattern of a finite non-negative float; `-0.0` maps to `0`.
pub fn float_to_ordered_word<F: FloatKey>(x: F) -> Result<u64> {
    let v = x.to_f64();
    if !v.is_finite() || v < 0.0 {
        return Err(Error::FloatDomain(v));
    }
    Ok(if v == 0.0 { 0 } else { x.raw_bits() })
}

pub fn ordered_word_to_float<F: FloatKey>(word: u64) -> F {
    F::from_word(word)
}

/// Draws a float the way the sort's input model does: a uniform real in
/// `[0, 1)` rounded down to a representable value. The unbiased exponent is
/// `-i` with probability `2^-i` and the mantissa is uniform.
pub fn model_float<F: FloatKey, R: Rng>(rng: &mut R) -> F {
    let fmt = F::FORMAT;
    let min_exp = fmt.bias() - 1;
    let mut i = 1u64;
    loop {
        let bits: u64 = rng.random();
        if bits != 0 {
            i += bits.leading_zeros() as u64;
            break;
        }
        i += 64;
        if i > min_exp {
            break;
        }
    }
    if i > min_exp {
        return F::from_word(0);
    }
    let mantissa = rng.random::<u64>() >> (64 - fmt.m);
    F::from_word(((fmt.bias() - i) << fmt.m) | mantissa)
}

pub fn model_floats<F: FloatKey, R: Rng>(rng: &mut R, n: usize) -> Vec<F> {
    (0..n).map(|_| model_float(rng)).collect()
}

/// Expected size of the largest class after one MSB pass with radix `r`, in
/// the closed form `n (1 - 2^(-2^(e-r+1)))` for `r < e + 1` and
/// `n / 2^(r-e)` otherwise.
///
/// The first branch overstates the tail by a factor of two; see
/// [`largest_class_fraction`] for the value computed from the model directly.
pub fn expected_largest_class(r: u32, e: u32, n: f64) -> f64 {
    if r < e + 1 {
        n * (1.0 - 1.0 / 2f64.powf(2f64.powi((e - r + 1) as i32)))
    } else {
        n / 2f64.powi((r - e) as i32)
    }
}

/// Probability of the most likely class when model floats are classified by
/// their top `r` bits, computed by summing the exponent distribution.
pub fn largest_class_fraction(r: u32, fmt: FloatFormat) -> f64 {
    assert!(r >= 1 && r <= fmt.word_bits(), "radix out of range");
    let exp_bits = (r - 1).min(fmt.e);
    let mantissa_bits = r - 1 - exp_bits;
    let low = fmt.e - exp_bits;
    let bias = fmt.bias();
    let zero = 0.5f64.powi(bias as i32 - 1);

    let mut per_prefix = vec![0.0f64; 1 << exp_bits];
    per_prefix[0] += zero;
    for i in 1..bias {
        let j = bias - i;
        per_prefix[(j >> low) as usize] += 0.5f64.powi(i as i32);
    }
    // The mantissa bits split every exponent evenly; the zero key stays whole.
    let split = 0.5f64.powi(mantissa_bits as i32);
    per_prefix
        .iter()
        .enumerate()
        .map(|(p, &v)| {
            if p == 0 {
                (v - zero) * split + zero
            } else {
                v * split
            }
        })
        .fold(0.0, f64::max)
}

/// Access probabilities of the first radix pass under the float model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentDistribution {
    /// Number of exponent groups `g`.
    pub groups: u64,
    /// Pointers per group `K`.
    pub per_group: u64,
    /// `2^-i` for groups `i = 1..=g`.
    pub group_probs: Vec<f64>,
    /// Probability of a non-zero key below every group.
    pub tail: f64,
    /// Probability of the key `0`.
    pub zero: f64,
}

impl ExponentDistribution {
    pub fn new(fmt: FloatFormat, groups: u64, per_group: u64) -> Result<Self> {
        let lowest = fmt.bias() - 1;
        if groups == 0 || groups > lowest || per_group == 0 {
            return Err(Error::Precondition(format!(
                "need 1 <= g <= {lowest} and K >= 1, got g = {groups}, K = {per_group}"
            )));
        }
        let group_probs: Vec<f64> = (1..=groups).map(|i| 0.5f64.powi(i as i32)).collect();
        let zero = 0.5f64.powi(lowest as i32);
        Ok(Self {
            groups,
            per_group,
            tail: 0.5f64.powi(groups as i32) - zero,
            zero,
            group_probs,
        })
    }

    /// Probability of each of the `g * K` pointers, `1 / (K 2^i)` for group `i`.
    pub fn pointer_probs(&self) -> Vec<f64> {
        let kk = self.per_group as f64;
        self.group_probs
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p / kk, self.per_group as usize))
            .collect()
    }

    /// Pointer probabilities conditioned on the key being in some group,
    /// ordered from the highest group down as keys are laid out.
    pub fn class_distribution(&self) -> Result<ClassDistribution> {
        let mut p = self.pointer_probs();
        p.reverse();
        ClassDistribution::from_weights(&p)
    }
}

/// Parameters of one float sort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadixPlan {
    pub fmt: FloatFormat,
    /// Keys below `theta` are quicksorted; `0` disables the split.
    pub theta: f64,
    /// Exponent bits that still vary among keys `>= theta`.
    pub e_prime: u32,
    /// Mantissa bits used by the first pass.
    pub m_prime: u32,
    /// `g = 2^e'`.
    pub groups: u64,
    /// `K = 2^m'`.
    pub group_width: u64,
    pub insertion_threshold: usize,
    /// Largest radix of the later passes; keeps each count array within the cache.
    pub max_radix_bits: u32,
    pub permute: PermuteKind,
    /// Upper bound on first-pass permute misses for the planned `n`, if known.
    pub predicted_first_pass_misses: Option<f64>,
    pub warning: Option<String>,
}

pub const INSERTION_THRESHOLD: usize = 8;

/// `min(ceil(log2 log2 (1/theta)), e)`.
pub fn effective_exponent(theta: f64, fmt: FloatFormat) -> u32 {
    let ll = (1.0 / theta).log2().log2();
    (ll.ceil().max(0.0) as u32).min(fmt.e)
}

impl RadixPlan {
    /// Plan for `n` keys under `geom` with `theta = 1/(log2 n)^2` and the
    /// first-pass width chosen by trading predicted misses against passes.
    pub fn auto(n: usize, fmt: FloatFormat, geom: CacheGeometry) -> Self {
        if n < 16 {
            let mut plan = Self::with_theta_unchecked(n, fmt, geom, 0.25, 0);
            plan.warning = Some(format!("n = {n} is below 16; using the minimum plan"));
            return plan;
        }
        let lg = (n as f64).log2();
        let theta = 1.0 / (lg * lg);
        Self::with_theta_unchecked(n, fmt, geom, theta, Self::mantissa_cap(n, fmt, theta))
    }

    /// Plan with a caller-supplied `theta`, which must lie in `[1/n, 1/log2 n]`.
    pub fn with_theta(n: usize, fmt: FloatFormat, geom: CacheGeometry, theta: f64) -> Result<Self> {
        let nf = n.max(2) as f64;
        if !(theta >= 1.0 / nf && theta <= 1.0 / nf.log2()) {
            return Err(Error::Precondition(format!(
                "theta = {theta} outside [1/n, 1/log2 n] for n = {n}"
            )));
        }
        Ok(Self::with_theta_unchecked(
            n,
            fmt,
            geom,
            theta,
            Self::mantissa_cap(n, fmt, theta),
        ))
    }

    /// `ceil(log2 n - 3) - e'`: a first pass of about `n/8` buckets in total.
    fn mantissa_cap(n: usize, fmt: FloatFormat, theta: f64) -> u32 {
        let r = ((n as f64).log2() - 3.0).ceil().max(0.0) as u32;
        r.saturating_sub(effective_exponent(theta, fmt)).min(fmt.m)
    }

    fn with_theta_unchecked(
        n: usize,
        fmt: FloatFormat,
        geom: CacheGeometry,
        theta: f64,
        m_cap: u32,
    ) -> Self {
        let e_prime = effective_exponent(theta, fmt);
        let groups = 1u64 << e_prime;
        let max_k = groups << m_cap;
        let choice = choose_k(
            geom,
            n as u64,
            Criterion::TradeOff(Default::default()),
            DistKind::FloatModel { groups },
            max_k,
        );
        let mut warning = None;
        let group_width = if choice.feasible {
            choice.per_group
        } else {
            warning = Some("no first-pass width met the constraints; using K = 1".into());
            1
        };
        let m_prime = group_width.trailing_zeros();
        Self {
            fmt,
            theta,
            e_prime,
            m_prime,
            groups,
            group_width,
            insertion_threshold: INSERTION_THRESHOLD,
            max_radix_bits: geom.capacity().trailing_zeros().max(1),
            permute: PermuteKind::InPlace,
            predicted_first_pass_misses: msb_radix_bound(geom, groups, group_width, n as u64).ok(),
            warning,
        }
    }

    /// First-pass classifier over words in `[theta, 1)`.
    fn first_pass_classifier(&self) -> Result<Classifier> {
        let bias = self.fmt.bias();
        let lo_exp = bias.saturating_sub(self.groups);
        // Every bucket spans 2^(m - m') words, so the range split is exact.
        let k = ((bias - lo_exp) << self.m_prime) as usize;
        Classifier::range(lo_exp << self.fmt.m, bias << self.fmt.m, k)
    }
}

/// Plan of the single-pass baseline: no split, `ceil(log2 n - 3)` top bits,
/// then insertion sort on every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NaivePlan {
    pub fmt: FloatFormat,
    pub radix_bits: u32,
}

impl NaivePlan {
    pub fn new(n: usize, fmt: FloatFormat) -> Self {
        let r = ((n.max(2) as f64).log2() - 3.0).ceil().max(1.0) as u32;
        Self {
            fmt,
            radix_bits: r.min(fmt.word_bits()),
        }
    }
}

/// What a sort did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortReport {
    pub n: usize,
    /// Keys below `theta`.
    pub small: usize,
    /// Distribution passes run (count plus permute each).
    pub passes: u64,
    pub first_pass_classes: usize,
    pub first_pass_largest_class: usize,
}

/// Splits `words` so that keys below `threshold` come first; returns their count.
pub fn partition_theta(words: &mut [u64], threshold: u64) -> usize {
    partition_probed(words, threshold, 0, &mut NoProbe)
}

fn partition_probed<P: Probe>(
    words: &mut [u64],
    threshold: u64,
    base: u64,
    probe: &mut P,
) -> usize {
    probe.phase("partition");
    let mut i = 0usize;
    let mut j = words.len();
    loop {
        while i < j {
            probe.touch(Tag::Data, base + i as u64);
            if words[i] >= threshold {
                break;
            }
            i += 1;
        }
        while i < j {
            probe.touch(Tag::Data, base + (j - 1) as u64);
            if words[j - 1] < threshold {
                break;
            }
            j -= 1;
        }
        if i + 1 >= j {
            return i;
        }
        probe.touch(Tag::Data, base + i as u64);
        probe.touch(Tag::Data, base + (j - 1) as u64);
        words.swap(i, j - 1);
        i += 1;
        j -= 1;
    }
}

fn insertion_sort_probed<P: Probe>(words: &mut [u64], base: u64, probe: &mut P) {
    for i in 1..words.len() {
        probe.touch(Tag::Data, base + i as u64);
        let x = words[i];
        let mut j = i;
        while j > 0 {
            probe.touch(Tag::Data, base + (j - 1) as u64);
            if words[j - 1] <= x {
                break;
            }
            words[j] = words[j - 1];
            probe.touch(Tag::Data, base + j as u64);
            j -= 1;
        }
        if j != i {
            probe.touch(Tag::Data, base + j as u64);
            words[j] = x;
        }
    }
}

pub fn insertion_sort(words: &mut [u64]) {
    insertion_sort_probed(words, 0, &mut NoProbe);
}

const QUICKSORT_CUTOFF: usize = 16;

fn quicksort_probed<P: Probe>(mut words: &mut [u64], mut base: u64, probe: &mut P) {
    // Recurse on the smaller side, loop on the larger.
    while words.len() > QUICKSORT_CUTOFF {
        let n = words.len();
        let mid = n / 2;
        for &(a, b) in &[(0, mid), (mid, n - 1), (0, mid)] {
            probe.touch(Tag::Data, base + a as u64);
            probe.touch(Tag::Data, base + b as u64);
            if words[b] < words[a] {
                words.swap(a, b);
            }
        }
        // Median now at `mid`; park it at the end.
        words.swap(mid, n - 1);
        let pivot = words[n - 1];
        let mut store = 0;
        for i in 0..n - 1 {
            probe.touch(Tag::Data, base + i as u64);
            if words[i] < pivot {
                probe.touch(Tag::Data, base + store as u64);
                words.swap(i, store);
                store += 1;
            }
        }
        probe.touch(Tag::Data, base + store as u64);
        words.swap(store, n - 1);
        let (left, right) = words.split_at_mut(store);
        let right = &mut right[1..];
        let right_base = base + store as u64 + 1;
        if left.len() < right.len() {
            quicksort_probed(left, base, probe);
            words = right;
            base = right_base;
        } else {
            quicksort_probed(right, right_base, probe);
            words = left;
        }
    }
    insertion_sort_probed(words, base, probe);
}

/// Median-of-three quicksort with insertion sort below 16 keys.
pub fn quicksort(words: &mut [u64]) {
    quicksort_probed(words, 0, &mut NoProbe);
}

fn shifted(layout: &SortLayout, offset: usize) -> SortLayout {
    SortLayout {
        data_base: layout.data_base + offset as u64,
        dest_base: layout.dest_base + offset as u64,
        ..*layout
    }
}

struct Pass<'a, P> {
    plan_kind: PermuteKind,
    threshold: usize,
    max_radix_bits: u32,
    layout: &'a SortLayout,
    probe: &'a mut P,
    passes: u64,
}

impl<P: Probe> Pass<'_, P> {
    /// One count + permute over `words` (at `offset` within DATA). Returns the
    /// class start offsets and sizes.
    fn distribute(
        &mut self,
        words: &mut [u64],
        offset: usize,
        cls: &Classifier,
    ) -> Result<Vec<(usize, usize)>> {
        let layout = shifted(self.layout, offset);
        let counts = count_phase_probed(words, cls, &layout, self.probe)?;
        let sizes = counts.sizes();
        let starts = counts.start.clone();
        match self.plan_kind {
            PermuteKind::InPlace => {
                permute_in_place_probed(words, counts, cls, &layout, self.probe)?;
            }
            PermuteKind::OutOfPlace => {
                let dest = permute_out_of_place_probed(words, counts, cls, &layout, self.probe)?;
                words.copy_from_slice(&dest);
            }
        }
        self.passes += 1;
        Ok(starts.into_iter().zip(sizes).collect())
    }

    /// Sorts keys that agree on every bit above `bits_left`.
    fn sort_low_bits(&mut self, words: &mut [u64], offset: usize, bits_left: u32) -> Result<()> {
        let n = words.len();
        if n <= self.threshold {
            self.probe.phase("insertion");
            insertion_sort_probed(words, self.layout.data_base + offset as u64, self.probe);
            return Ok(());
        }
        if bits_left == 0 {
            return Ok(());
        }
        let want = ((n as f64).log2() - 3.0).ceil().max(1.0) as u32;
        let r = want.min(self.max_radix_bits).min(bits_left).max(1);
        let shift = bits_left - r;
        let cls = Classifier::top_bits(shift, r)?;
        for (start, size) in self.distribute(words, offset, &cls)? {
            if size > 1 {
                self.sort_low_bits(&mut words[start..start + size], offset + start, shift)?;
            }
        }
        Ok(())
    }
}

fn to_words<F: FloatKey>(data: &[F]) -> Result<Vec<u64>> {
    data.iter()
        .map(|&x| {
            let w = float_to_ordered_word(x)?;
            if x.to_f64() >= 1.0 {
                return Err(Error::FloatDomain(x.to_f64()));
            }
            Ok(w)
        })
        .collect()
}

/// Sorts words of floats in `[0, 1)` under `plan`, reporting memory accesses.
pub fn sort_words_probed<P: Probe>(
    words: &mut [u64],
    plan: &RadixPlan,
    layout: &SortLayout,
    probe: &mut P,
) -> Result<SortReport> {
    let n = words.len();
    let mut report = SortReport {
        n,
        ..Default::default()
    };
    if n <= plan.insertion_threshold {
        probe.phase("insertion");
        insertion_sort_probed(words, layout.data_base, probe);
        return Ok(report);
    }
    let threshold = if plan.theta > 0.0 {
        let t = theta_word(plan.fmt, plan.theta)?;
        partition_probed(words, t, layout.data_base, probe)
    } else {
        0
    };
    report.small = threshold;
    let (small, big) = words.split_at_mut(threshold);
    probe.phase("small-sort");
    quicksort_probed(small, layout.data_base, probe);

    let mut pass = Pass {
        plan_kind: plan.permute,
        threshold: plan.insertion_threshold,
        max_radix_bits: plan.max_radix_bits,
        layout,
        probe,
        passes: 0,
    };
    if big.len() <= plan.insertion_threshold {
        pass.sort_low_bits(big, threshold, 0)?;
        return Ok(report);
    }
    let cls = plan.first_pass_classifier()?;
    let classes = pass.distribute(big, threshold, &cls)?;
    report.first_pass_classes = classes.len();
    report.first_pass_largest_class = classes.iter().map(|c| c.1).max().unwrap_or(0);
    let bits_left = plan.fmt.m - plan.m_prime;
    for (start, size) in classes {
        if size > 1 {
            pass.sort_low_bits(&mut big[start..start + size], threshold + start, bits_left)?;
        }
    }
    report.passes = pass.passes;
    Ok(report)
}

/// Word of the float nearest `theta` in `fmt`.
fn theta_word(fmt: FloatFormat, theta: f64) -> Result<u64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::FloatDomain(theta));
    }
    Ok(if fmt == FloatFormat::F32 {
        (theta as f32).to_bits() as u64
    } else {
        theta.to_bits()
    })
}

/// Sorts floats in `[0, 1)` ascending.
pub fn sort_floats<F: FloatKey>(data: &mut [F], plan: &RadixPlan) -> Result<SortReport> {
    check_format::<F>(plan.fmt)?;
    let mut words = to_words(data)?;
    let layout = SortLayout::packed(words.len(), 0);
    let report = sort_words_probed(&mut words, plan, &layout, &mut NoProbe)?;
    for (d, w) in data.iter_mut().zip(words) {
        *d = F::from_word(w);
    }
    Ok(report)
}

fn check_format<F: FloatKey>(fmt: FloatFormat) -> Result<()> {
    if F::FORMAT != fmt {
        return Err(Error::Precondition(format!(
            "plan is for {fmt}, keys are {}",
            F::FORMAT
        )));
    }
    Ok(())
}

/// The single-pass baseline, reporting memory accesses.
pub fn naive_sort_words_probed<P: Probe>(
    words: &mut [u64],
    plan: &NaivePlan,
    layout: &SortLayout,
    probe: &mut P,
) -> Result<SortReport> {
    let n = words.len();
    let r = plan.radix_bits;
    let cls = Classifier::top_bits(plan.fmt.word_bits() - r, r)?;
    let mut pass = Pass {
        plan_kind: PermuteKind::InPlace,
        threshold: usize::MAX,
        max_radix_bits: r,
        layout,
        probe,
        passes: 0,
    };
    let classes = pass.distribute(words, 0, &cls)?;
    let report = SortReport {
        n,
        small: 0,
        passes: 1,
        first_pass_classes: classes.len(),
        first_pass_largest_class: classes.iter().map(|c| c.1).max().unwrap_or(0),
    };
    pass.probe.phase("insertion");
    for (start, size) in classes {
        if size > 1 {
            insertion_sort_probed(
                &mut words[start..start + size],
                layout.data_base + start as u64,
                pass.probe,
            );
        }
    }
    Ok(report)
}

pub fn naive_sort_floats<F: FloatKey>(data: &mut [F]) -> Result<SortReport> {
    let mut words = to_words(data)?;
    let plan = NaivePlan::new(words.len(), F::FORMAT);
    let layout = SortLayout::packed(words.len(), 1 << plan.radix_bits);
    let report = naive_sort_words_probed(&mut words, &plan, &layout, &mut NoProbe)?;
    for (d, w) in data.iter_mut().zip(words) {
        *d = F::from_word(w);
    }
    Ok(report)
}

const KEY_FILE_MAGIC: &[u8; 8] = b"CSKEYS\x00\x01";

/// Writes keys as: 8-byte magic, `e` and `m` as little-endian `u16`, four
/// zero bytes, `n` as `u64`, then `n` little-endian words of the float's width.
pub fn write_key_file<F: FloatKey, W: Write>(mut out: W, keys: &[F]) -> Result<()> {
    let fmt = F::FORMAT;
    out.write_all(KEY_FILE_MAGIC)?;
    out.write_u16::<LittleEndian>(fmt.e as u16)?;
    out.write_u16::<LittleEndian>(fmt.m as u16)?;
    out.write_u32::<LittleEndian>(0)?;
    out.write_u64::<LittleEndian>(keys.len() as u64)?;
    for k in keys {
        match fmt.word_bits() {
            32 => out.write_u32::<LittleEndian>(k.raw_bits() as u32)?,
            _ => out.write_u64::<LittleEndian>(k.raw_bits())?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the header of a key file.
pub fn read_key_header<R: Read>(input: &mut R) -> Result<(FloatFormat, u64)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != KEY_FILE_MAGIC {
        return Err(Error::KeyFile("bad magic".into()));
    }
    let e = input.read_u16::<LittleEndian>()? as u32;
    let m = input.read_u16::<LittleEndian>()? as u32;
    let _reserved = input.read_u32::<LittleEndian>()?;
    let n = input.read_u64::<LittleEndian>()?;
    let fmt = FloatFormat::new(e, m)
        .map_err(|_| Error::KeyFile(format!("unsupported format e={e} m={m}")))?;
    Ok((fmt, n))
}

pub fn read_key_file<F: FloatKey, R: Read>(mut input: R) -> Result<Vec<F>> {
    let (fmt, n) = read_key_header(&mut input)?;
    if fmt != F::FORMAT {
        return Err(Error::KeyFile(format!(
            "file holds {fmt} keys, expected {}",
            F::FORMAT
        )));
    }
    let mut keys = Vec::with_capacity(n.min(1 << 28) as usize);
    for i in 0..n {
        let w = match fmt.word_bits() {
            32 => input.read_u32::<LittleEndian>().map(u64::from),
            _ => input.read_u64::<LittleEndian>(),
        }
        .map_err(|e| Error::KeyFile(format!("truncated at key {i} of {n}: {e}")))?;
        keys.push(F::from_word(w));
    }
    Ok(keys)
}
