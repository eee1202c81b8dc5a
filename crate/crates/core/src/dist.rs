//! Class probability vectors and the block-level quantities derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;

/// Probabilities `p_1..p_k` of a key falling into each of `k` ordered classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("k must be at least 1".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Distribution(format!("bad probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Distribution(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum.is_nan() || sum <= 0.0 || !sum.is_finite() {
            return Err(Error::Distribution(
                "weights must have a positive finite sum".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Distribution("k must be at least 1".into()));
        }
        Ok(Self {
            probs: vec![1.0 / k as f64; k],
        })
    }

    /// `p_i` proportional to `2^-i` for `i = 1..=k`.
    pub fn geometric(k: usize) -> Result<Self> {
        let weights: Vec<f64> = (1..=k).map(|i| 0.5f64.powi(i as i32)).collect();
        Self::from_weights(&weights)
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn p(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn is_uniform(&self) -> bool {
        let p0 = self.probs[0];
        self.probs.iter().all(|&p| p == p0)
    }

    /// Appends zero-probability classes until `block_size` divides `k`.
    pub fn padded_to(&self, block_size: usize) -> Self {
        let k = self.k().div_ceil(block_size) * block_size;
        let mut probs = self.probs.clone();
        probs.resize(k, 0.0);
        Self { probs }
    }

    /// Probability `P_i` of each block of `block_size` consecutive classes.
    /// Requires `block_size | k`.
    pub fn block_probs(&self, block_size: usize) -> Vec<f64> {
        debug_assert_eq!(self.k() % block_size, 0);
        self.probs
            .chunks(block_size)
            .map(|c| c.iter().sum())
            .collect()
    }

    /// `a^i`: class `i` removed and the rest renormalized.
    pub fn excluding_class(&self, i: usize) -> Vec<f64> {
        let rest = 1.0 - self.probs[i];
        self.probs
            .iter()
            .enumerate()
            .map(|(j, &p)| if j == i || rest <= 0.0 { 0.0 } else { p / rest })
            .collect()
    }

    /// `b^i`: every class of block `i` removed and the rest renormalized.
    pub fn excluding_block(&self, block: usize, block_size: usize) -> Vec<f64> {
        let range = block * block_size..(block + 1) * block_size;
        let pb: f64 = self.probs[range.clone()].iter().sum();
        let rest = 1.0 - pb;
        self.probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                if range.contains(&j) || rest <= 0.0 {
                    0.0
                } else {
                    p / rest
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ClassDistribution::new(vec![]).is_err());
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(ClassDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ClassDistribution::new(vec![0.25, 0.75, 0.0]).is_ok());
        assert!(ClassDistribution::from_weights(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn geometric_is_normalized_and_halving() {
        let d = ClassDistribution::geometric(10).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for w in d.probs().windows(2) {
            assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_probabilities() {
        let d = ClassDistribution::from_weights(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        let pb = d.block_probs(2);
        assert_eq!(pb.len(), 3);
        assert!((pb[0] - 0.3).abs() < 1e-15);
        assert!((pb[1] - 0.7).abs() < 1e-15);
        assert_eq!(pb[2], 0.0);
    }

    #[test]
    fn padding() {
        let d = ClassDistribution::uniform(5).unwrap().padded_to(4);
        assert_eq!(d.k(), 8);
        assert_eq!(&d.probs()[5..], &[0.0, 0.0, 0.0]);
        assert_eq!(ClassDistribution::uniform(8).unwrap().padded_to(4).k(), 8);
    }

    #[test]
    fn excluded_vectors_sum_to_one() {
        let d = ClassDistribution::geometric(16).unwrap();
        for i in 0..16 {
            let a = d.excluding_class(i);
            assert_eq!(a[i], 0.0);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for blk in 0..4 {
            let b = d.excluding_block(blk, 4);
            assert!(b[blk * 4..blk * 4 + 4].iter().all(|&x| x == 0.0));
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
