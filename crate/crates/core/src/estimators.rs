//! Gradient estimators for `E_q[L(Z)]` under the point-process posterior.
//!
//! The score-function path samples subsets and weights their centred bound
//! values by `d log q(Z) / d logits`. The masked path evaluates the collapsed
//! bound on the full candidate set with excluded points masked out, which
//! admits a Concrete relaxation of the inclusion indicators. Enumeration over
//! all `2^K` subsets gives exact answers for small `K`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adgrad::{logistic, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::{collapsed_bound_from_grams, BoundMode, SubsetIndex, SvgpModel, SvgpVars};
use crate::point_process::PppPosterior;

/// Largest candidate count accepted by [`enumerate_expectation`].
pub const MAX_ENUMERATION: usize = 20;

/// Decaying average of sampled bound values, subtracted from the samples
/// before weighting the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
    pub enabled: bool,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "decay must lie in (0, 1)");
        Self {
            value: 0.0,
            decay,
            initialized: false,
            enabled: true,
        }
    }

    /// Starts from a known value instead of the first batch.
    pub fn with_value(value: f64, decay: f64) -> Self {
        Self {
            value,
            initialized: true,
            ..Self::new(decay)
        }
    }

    /// No centring at all.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new(0.9)
        }
    }

    /// Baseline used for sample `s` of `values`.
    ///
    /// Before the first update there is no history, so each sample is
    /// centred on the mean of the others, which keeps the estimate unbiased.
    fn for_sample(&self, values: &[f64], s: usize) -> f64 {
        if !self.enabled {
            0.0
        } else if self.initialized {
            self.value
        } else if values.len() < 2 {
            0.0
        } else {
            let total: f64 = values.iter().sum();
            (total - values[s]) / (values.len() - 1) as f64
        }
    }

    fn update(&mut self, mean: f64) {
        if !self.enabled {
            return;
        }
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * mean;
        } else {
            self.value = mean;
            self.initialized = true;
        }
    }
}

/// Output of [`sf_gradient`].
#[derive(Debug, Clone)]
pub struct SfEstimate {
    /// Ascent direction for the logits.
    pub logit_grad: Vec<f64>,
    /// Parameter gradients averaged over the sampled subsets.
    pub param_grads: Vec<Mat>,
    pub mean_value: f64,
    pub subsets: Vec<SubsetIndex>,
}

/// Score-function estimate of `d/d logits E_q[L(Z)]` from `samples` draws.
///
/// `bound_fn` returns `L(Z)` and its parameter gradients. Subsets are drawn
/// sequentially from `rng` and then evaluated in parallel.
pub fn sf_gradient<F, R>(
    post: &PppPosterior,
    bound_fn: F,
    samples: usize,
    baseline: &mut BaselineState,
    rng: &mut R,
) -> Result<SfEstimate>
where
    F: Fn(&SubsetIndex) -> Result<(f64, Vec<Mat>)> + Sync,
    R: Rng + ?Sized,
{
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let subsets: Vec<SubsetIndex> = (0..samples).map(|_| post.sample(rng)).collect();
    let evaluated: Vec<(f64, Vec<Mat>)> = subsets
        .par_iter()
        .map(|z| {
            bound_fn(z).map_err(|e| Error::Bound {
                subset: z.as_slice().to_vec(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let values: Vec<f64> = evaluated.iter().map(|(v, _)| *v).collect();
    let inv = 1.0 / samples as f64;
    let mut logit_grad = vec![0.0; post.len()];
    for (s, z) in subsets.iter().enumerate() {
        let weight = (values[s] - baseline.for_sample(&values, s)) * inv;
        for (g, score) in logit_grad.iter_mut().zip(post.score(z)) {
            *g += weight * score;
        }
    }

    let mut param_grads: Vec<Mat> = Vec::new();
    for (_, grads) in &evaluated {
        if param_grads.is_empty() {
            param_grads = grads.iter().map(|g| g * inv).collect();
        } else {
            for (acc, g) in param_grads.iter_mut().zip(grads) {
                *acc += g * inv;
            }
        }
    }

    let mean_value = values.iter().sum::<f64>() * inv;
    baseline.update(mean_value);
    Ok(SfEstimate {
        logit_grad,
        param_grads,
        mean_value,
        subsets,
    })
}

/// Exact `E_q[L(Z)]` and its logit gradient by summing over all subsets.
pub fn enumerate_expectation<F>(post: &PppPosterior, mut bound_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&SubsetIndex) -> Result<f64>,
{
    let k = post.len();
    if k > MAX_ENUMERATION {
        return Err(Error::TooManyCandidates(k));
    }
    let mut expectation = 0.0;
    let mut grad = vec![0.0; k];
    for bits in 0u32..(1u32 << k) {
        let mask: Vec<bool> = (0..k).map(|i| bits >> i & 1 == 1).collect();
        let z = SubsetIndex::from_mask(&mask);
        let q = post.log_pmf(&z).exp();
        if q == 0.0 {
            continue;
        }
        let value = bound_fn(&z)?;
        expectation += q * value;
        for (g, score) in grad.iter_mut().zip(post.score(&z)) {
            *g += q * value * score;
        }
    }
    Ok((expectation, grad))
}

/// Inclusion weights `b` in `[0, 1]^K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskVector(Vec<f64>);

impl MaskVector {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self(b))
    }

    pub fn from_subset(subset: &SubsetIndex, candidates: usize) -> Self {
        Self(
            subset
                .to_mask(candidates)
                .into_iter()
                .map(|inc| if inc { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Indices with `b_k = 1`.
    pub fn to_subset(&self) -> SubsetIndex {
        SubsetIndex::from_mask(&self.0.iter().map(|&v| v == 1.0).collect::<Vec<_>>())
    }
}

/// Collapsed bound over all candidates with the kernel masked by `b`.
///
/// `K_b = K * (b b^T) + diag(b (k - 1) + 1 - b^2 k)` and `K_bN = diag(b) K_MN`,
/// so a masked candidate becomes an independent unit-variance variable that
/// carries no information about the data.
pub fn masked_bound_expr<'t>(vars: &SvgpVars<'t>, b: Var<'t>, x: Var<'t>, y: Var<'t>) -> Var<'t> {
    let tape = x.tape();
    let n = x.shape().0;
    let kmm = vars.kernel.gram(vars.inducing, vars.inducing);
    let kmn = vars.kernel.gram(vars.inducing, x);
    let kdiag = kmm.diag();
    let ones_k = tape.constant(Mat::from_element(b.shape().0, 1, 1.0));
    let b_sq = b.square();
    let diag_fix = b.mul(kdiag - ones_k) + ones_k - b_sq.mul(kdiag);
    let kmm_b = kmm.mul(b.matmul(b.t())) + diag_fix.diag_embed();
    let kmn_b = b.matmul(tape.constant(Mat::from_element(1, n, 1.0))).mul(kmn);
    let knn_trace = vars.kernel.diag(n).sum();
    collapsed_bound_from_grams(kmm_b, kmn_b, knn_trace, y, vars.log_noise)
}

/// Masked collapsed bound at a binary mask; equals the collapsed bound of
/// the subset `{k : b_k = 1}`.
pub fn masked_bound(model: &SvgpModel, mask: &MaskVector, x: &Mat, y: &Mat) -> Result<f64> {
    if model.mode != BoundMode::Collapsed {
        return Err(Error::Config("the masked bound requires the collapsed mode".into()));
    }
    if mask.len() != model.num_candidates() {
        return Err(Error::Config(format!(
            "mask has {} entries for {} candidates",
            mask.len(),
            model.num_candidates()
        )));
    }
    if !mask.is_binary() {
        return Err(Error::Config("masked_bound takes a binary mask".into()));
    }
    let tape = Tape::new();
    let vars = model.register(&tape);
    let b = tape.column_constant(mask.as_slice());
    let out = masked_bound_expr(&vars, b, tape.constant(x.clone()), tape.constant(y.clone()));
    Ok(tape.scalar(out)?)
}

/// Temperature schedule of the binary Concrete relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcreteConfig {
    pub initial_temperature: f64,
    pub final_temperature: f64,
    /// Multiplicative decay per epoch.
    pub decay: f64,
}

impl Default for ConcreteConfig {
    fn default() -> Self {
        Self {
            initial_temperature: 1.0,
            final_temperature: 0.1,
            decay: 0.99,
        }
    }
}

impl ConcreteConfig {
    pub fn constant(temperature: f64) -> Self {
        Self {
            initial_temperature: temperature,
            final_temperature: temperature,
            decay: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_temperature > 0.0
            && self.final_temperature > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("Concrete temperatures must be positive and decay in (0, 1]".into()))
        }
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        (self.initial_temperature * self.decay.powi(epoch as i32)).max(self.final_temperature)
    }
}

/// Relaxed inclusion weights `logistic((logit + log u - log(1 - u)) / tau)`.
pub fn sample_relaxed<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Vec<f64> {
    logistic_noise(logits.len(), rng)
        .into_iter()
        .zip(logits)
        .map(|(e, &l)| logistic((l + e) / temperature))
        .collect()
}

fn logistic_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

/// Output of [`concrete_gradient`].
#[derive(Debug, Clone)]
pub struct ConcreteEstimate {
    pub logit_grad: Vec<f64>,
    pub param_grads: Vec<Mat>,
    pub value: f64,
    pub mask: Vec<f64>,
}

/// Pathwise gradient of the masked bound at one relaxed mask sample.
pub fn concrete_gradient<R: Rng + ?Sized>(
    model: &SvgpModel,
    post: &PppPosterior,
    config: &ConcreteConfig,
    epoch: usize,
    x: &Mat,
    y: &Mat,
    rng: &mut R,
) -> Result<ConcreteEstimate> {
    if model.mode != BoundMode::Collapsed {
        return Err(Error::Config("the Concrete path requires the collapsed mode".into()));
    }
    config.validate()?;
    let tau = config.temperature(epoch);
    let noise = logistic_noise(post.len(), rng);
    let tape = Tape::new();
    let vars = model.register(&tape);
    let logits = post.register(&tape);
    let b = (logits + tape.column_constant(&noise)).scale(1.0 / tau).logistic();
    let out = masked_bound_expr(&vars, b, tape.constant(x.clone()), tape.constant(y.clone()));
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok(ConcreteEstimate {
        logit_grad: grads.wrt(logits).as_slice().to_vec(),
        param_grads: vars.collect(&grads),
        value,
        mask: tape.value(b)?.as_slice().to_vec(),
    })
}
