//! Discrete Poisson point process over a candidate set, the squared-cardinality
//! prior, and their closed-form KL divergence.
//!
//! Each candidate `k` is included independently with probability
//! `lambda_k = logistic(logit_k)`, so `|Z|` is Poisson-binomial with mean
//! `E = sum lambda_k` and variance `V = sum lambda_k (1 - lambda_k)`. Under
//! the prior `p(Z) = C exp(-alpha |Z|^2)`:
//!
//! ```text
//! KL[q || p] = -log C + alpha (V + E^2) - H(lambda)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adgrad::{log_sigmoid, logistic, Mat, Tape, Var};
use crate::gp::SubsetIndex;

/// Inclusion probabilities stored as unconstrained logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PppPosterior {
    pub logits: Vec<f64>,
}

impl PppPosterior {
    /// Every candidate at probability 0.5.
    pub fn new(candidates: usize) -> Self {
        Self {
            logits: vec![0.0; candidates],
        }
    }

    pub fn from_logits(logits: Vec<f64>) -> Self {
        Self { logits }
    }

    /// Logits for the given probabilities, which must lie in (0, 1).
    pub fn from_probs(probs: &[f64]) -> Self {
        Self {
            logits: probs.iter().map(|p| (p / (1.0 - p)).ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| logistic(l)).collect()
    }

    /// `log q(Z)`.
    pub fn log_pmf(&self, subset: &SubsetIndex) -> f64 {
        let mask = subset.to_mask(self.len());
        self.logits
            .iter()
            .zip(mask)
            .map(|(&l, inc)| if inc { log_sigmoid(l) } else { log_sigmoid(-l) })
            .sum()
    }

    /// `d log q(Z) / d logits = 1[k in Z] - lambda_k`.
    pub fn score(&self, subset: &SubsetIndex) -> Vec<f64> {
        let mask = subset.to_mask(self.len());
        self.logits
            .iter()
            .zip(mask)
            .map(|(&l, inc)| if inc { 1.0 } else { 0.0 } - logistic(l))
            .collect()
    }

    /// Includes each candidate independently with its probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SubsetIndex {
        let mask: Vec<bool> = self
            .logits
            .iter()
            .map(|&l| rng.random::<f64>() < logistic(l))
            .collect();
        SubsetIndex::from_mask(&mask)
    }

    /// Mean and variance of `|Z|`.
    pub fn cardinality_stats(&self) -> (f64, f64) {
        self.probs()
            .iter()
            .fold((0.0, 0.0), |(e, v), &p| (e + p, v + p * (1.0 - p)))
    }

    /// Sum of Bernoulli entropies.
    pub fn entropy(&self) -> f64 {
        self.logits.iter().map(|&l| bernoulli_entropy(l)).sum()
    }

    pub fn kl_to_prior(&self, prior: &PriorSpec) -> f64 {
        let (e, v) = self.cardinality_stats();
        -prior.log_normalizer() + prior.alpha * (v + e * e) - self.entropy()
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(Mat::from_column_slice(self.len(), 1, &self.logits))
    }
}

fn bernoulli_entropy(logit: f64) -> f64 {
    let p = logistic(logit);
    -(p * log_sigmoid(logit) + (1.0 - p) * log_sigmoid(-logit))
}

/// Differentiable `log q(Z)` for a column of logits.
pub fn log_pmf_expr<'t>(logits: Var<'t>, subset: &SubsetIndex) -> Var<'t> {
    let k = logits.shape().0;
    let sign: Vec<f64> = subset
        .to_mask(k)
        .into_iter()
        .map(|inc| if inc { 1.0 } else { -1.0 })
        .collect();
    logits
        .mul(logits.tape().column_constant(&sign))
        .log_sigmoid()
        .sum()
}

/// Differentiable `(E, V)` of the cardinality.
pub fn cardinality_expr(logits: Var<'_>) -> (Var<'_>, Var<'_>) {
    let p = logits.logistic();
    let q = logits.neg().logistic();
    (p.sum(), p.mul(q).sum())
}

/// Differentiable entropy of the point process.
pub fn entropy_expr(logits: Var<'_>) -> Var<'_> {
    let p = logits.logistic();
    let q = logits.neg().logistic();
    let log_p = logits.log_sigmoid();
    let log_q = logits.neg().log_sigmoid();
    (p.mul(log_p) + q.mul(log_q)).sum().neg()
}

/// Differentiable `KL[q || p_alpha]`.
pub fn kl_to_prior_expr<'t>(logits: Var<'t>, prior: &PriorSpec) -> Var<'t> {
    let (e, v) = cardinality_expr(logits);
    let second_moment = v + e.square();
    (second_moment.scale(prior.alpha) - entropy_expr(logits)).offset(-prior.log_normalizer())
}

/// Prior `p(Z) ∝ exp(-alpha |Z|^2)` over subsets of `candidates` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub alpha: f64,
    pub candidates: usize,
}

impl PriorSpec {
    pub fn new(alpha: f64, candidates: usize) -> Self {
        assert!(alpha >= 0.0, "prior strength must be non-negative");
        Self { alpha, candidates }
    }

    /// `log C = -log sum_{k=0}^{K} binom(K, k) exp(-alpha k^2)`, in log space.
    pub fn log_normalizer(&self) -> f64 {
        let k_max = self.candidates;
        let kf = k_max as f64;
        let mut log_binom = 0.0;
        let mut terms = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            if k > 0 {
                log_binom += (kf - k as f64 + 1.0).ln() - (k as f64).ln();
            }
            terms.push(log_binom - self.alpha * (k as f64).powi(2));
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        -(max + sum.ln())
    }

    /// `log p(Z)` for a set of the given size.
    pub fn log_pmf(&self, size: usize) -> f64 {
        self.log_normalizer() - self.alpha * (size as f64).powi(2)
    }
}
