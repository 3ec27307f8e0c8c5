//! Three-phase training: pre-fit on all candidates, joint fit with the point
//! process, then a post-fit on the extracted subset.

mod adam;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adgrad::{Mat, Tape};
use crate::error::{Error, Result};
use crate::estimators::{concrete_gradient, sf_gradient, BaselineState, ConcreteConfig};
use crate::gp::{Block, BoundMode, SubsetIndex, SvgpModel};
use crate::point_process::{kl_to_prior_expr, PppPosterior, PriorSpec};

/// How the subset kept for the post phase is read off the point process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    /// `{k : lambda_k >= 0.5}`.
    #[default]
    Threshold,
    /// One draw from the point process.
    Sample,
}

/// Gradient estimator for the point-process logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    ScoreFunction,
    /// Masked bound with a binary Concrete relaxation; collapsed mode only.
    Concrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_pre: usize,
    pub n_ppp: usize,
    pub n_post: usize,
    pub lr: f64,
    pub lr_logits: f64,
    pub samples: usize,
    pub baseline_decay: f64,
    /// 0 means full batch.
    pub minibatch: usize,
    pub seed: u64,
    pub alpha: f64,
    pub extraction: ExtractionMode,
    pub optimize_z_during_ppp: bool,
    pub update_hyper_during_ppp: bool,
    pub mode: BoundMode,
    pub estimator: Estimator,
    pub concrete: ConcreteConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_pre: 200,
            n_ppp: 600,
            n_post: 200,
            lr: 0.01,
            lr_logits: 0.2,
            samples: 4,
            baseline_decay: 0.9,
            minibatch: 0,
            seed: 0,
            alpha: 0.05,
            extraction: ExtractionMode::Threshold,
            optimize_z_during_ppp: false,
            update_hyper_during_ppp: true,
            mode: BoundMode::Collapsed,
            estimator: Estimator::ScoreFunction,
            concrete: ConcreteConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr_logits > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if !(self.baseline_decay > 0.0 && self.baseline_decay < 1.0) {
            return bad("baseline_decay must lie in (0, 1)");
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return bad("alpha must be non-negative");
        }
        if self.minibatch > n {
            return bad("minibatch larger than the data set");
        }
        if self.minibatch != 0 && self.minibatch < n && self.mode == BoundMode::Collapsed {
            return Err(Error::MinibatchInCollapsedMode);
        }
        if self.estimator == Estimator::Concrete && self.mode != BoundMode::Collapsed {
            return bad("the Concrete estimator requires the collapsed mode");
        }
        self.concrete.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Ppp,
    Post,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Ppp => "ppp",
            Phase::Post => "post",
        })
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Bound during pre/post, `E_q[L] - KL` during the point-process phase.
    pub elbo: f64,
    pub ppp_kl: f64,
    #[serde(rename = "expected_M")]
    pub expected_m: f64,
    pub wall_ms: f64,
}

impl EpochRecord {
    /// Equality of everything except the wall time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.phase == other.phase
            && self.elbo.to_bits() == other.elbo.to_bits()
            && self.ppp_kl.to_bits() == other.ppp_kl.to_bits()
            && self.expected_m.to_bits() == other.expected_m.to_bits()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn same_numbers(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_numbers(b))
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model pruned to `subset` and post-fitted.
    pub model: SvgpModel,
    /// Point process at the end of its phase, over the original candidates.
    pub posterior: PppPosterior,
    /// Candidates kept, indexed into the original candidate set.
    pub subset: SubsetIndex,
    pub history: TrainHistory,
}

/// Subset kept after the point-process phase; never empty.
pub fn extract_subset<R: Rng + ?Sized>(post: &PppPosterior, mode: ExtractionMode, rng: &mut R) -> SubsetIndex {
    let subset = match mode {
        ExtractionMode::Threshold => {
            SubsetIndex::from_mask(&post.probs().iter().map(|&p| p >= 0.5).collect::<Vec<_>>())
        }
        ExtractionMode::Sample => post.sample(rng),
    };
    if !subset.is_empty() || post.is_empty() {
        return subset;
    }
    let best = post
        .logits
        .iter()
        .enumerate()
        .fold(0, |best, (k, &l)| if l > post.logits[best] { k } else { best });
    SubsetIndex::from_mask(&(0..post.len()).map(|k| k == best).collect::<Vec<_>>())
}

/// Random partition of `0..n` into batches of `size` (the last may be short).
/// `size` of 0 or `n` gives one ordered batch.
pub fn minibatch_iter<R: Rng + ?Sized>(n: usize, size: usize, mode: BoundMode, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size >= n {
        return Ok(vec![(0..n).collect()]);
    }
    if mode == BoundMode::Collapsed {
        return Err(Error::MinibatchInCollapsedMode);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(size).map(|c| c.to_vec()).collect())
}

fn rows(m: &Mat, idx: &[usize]) -> Mat {
    m.select_rows(idx.iter())
}

/// Learning rate per block, zero for frozen blocks.
fn block_rates(config: &TrainConfig, phase: Phase) -> Vec<f64> {
    Block::ALL
        .iter()
        .map(|b| {
            let frozen = phase == Phase::Ppp
                && match b {
                    Block::Inducing => !config.optimize_z_during_ppp,
                    Block::LogLengthscales | Block::LogVariance | Block::LogNoise => {
                        !config.update_hyper_during_ppp
                    }
                    Block::QMu | Block::QSqrt => false,
                };
            if frozen {
                0.0
            } else {
                config.lr
            }
        })
        .collect()
}

fn descend(model: &mut SvgpModel, ascent: &[Mat], state: &mut AdamState, rates: &[f64]) {
    let mut params = model.blocks();
    let grads: Vec<Mat> = ascent.iter().map(|g| -g).collect();
    if adam_step(&mut params, &grads, state, rates) {
        model.set_blocks(&params);
    }
}

fn in_phase<T>(phase: Phase, epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Training {
        phase: phase.to_string(),
        epoch,
        source: Box::new(e),
    })
}

/// Fits `model` to `subset` for `epochs` epochs, appending to `history`.
#[allow(clippy::too_many_arguments)]
fn fit_fixed(
    model: &mut SvgpModel,
    subset: &SubsetIndex,
    x: &Mat,
    y: &Mat,
    config: &TrainConfig,
    phase: Phase,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    history: &mut TrainHistory,
) -> Result<()> {
    let n = x.nrows();
    let rates = block_rates(config, phase);
    let mut state = AdamState::new(&model.blocks());
    for _ in 0..epochs {
        let epoch = history.records.len();
        let start = Instant::now();
        let batches = in_phase(phase, epoch, minibatch_iter(n, config.minibatch, model.mode, rng))?;
        let mut total = 0.0;
        for batch in &batches {
            let scale = n as f64 / batch.len() as f64;
            let (xb, yb) = (rows(x, batch), rows(y, batch));
            let (value, grads) = in_phase(phase, epoch, model.bound_with_grad(subset, &xb, &yb, scale))?;
            descend(model, &grads, &mut state, &rates);
            total += value;
        }
        history.records.push(EpochRecord {
            epoch,
            phase,
            elbo: total / batches.len() as f64,
            ppp_kl: 0.0,
            expected_m: subset.len() as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

/// `KL[q || p]` and its gradient with respect to the logits.
fn kl_and_grad(post: &PppPosterior, prior: &PriorSpec) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let logits = post.register(&tape);
    let kl = kl_to_prior_expr(logits, prior);
    let value = tape.scalar(kl)?;
    let grad = tape.backward(kl)?.wrt(logits);
    Ok((value, grad.as_slice().to_vec()))
}

/// Runs the point-process phase in place.
fn fit_ppp(
    model: &mut SvgpModel,
    post: &mut PppPosterior,
    x: &Mat,
    y: &Mat,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    history: &mut TrainHistory,
) -> Result<()> {
    let n = x.nrows();
    let phase = Phase::Ppp;
    let prior = PriorSpec::new(config.alpha, model.num_candidates());
    let rates = block_rates(config, phase);
    let mut state = AdamState::new(&model.blocks());
    let mut logit_state = AdamState::new(&[Mat::zeros(post.len(), 1)]);
    let mut baseline = BaselineState::new(config.baseline_decay);
    for ppp_epoch in 0..config.n_ppp {
        let epoch = history.records.len();
        let start = Instant::now();
        let batches = in_phase(phase, epoch, minibatch_iter(n, config.minibatch, model.mode, rng))?;
        let mut total = 0.0;
        let mut kl = 0.0;
        for batch in &batches {
            let scale = n as f64 / batch.len() as f64;
            let (xb, yb) = (rows(x, batch), rows(y, batch));
            let (logit_grad, param_grads, value) = match config.estimator {
                Estimator::ScoreFunction => {
                    let current = &*model;
                    let est = sf_gradient(
                        post,
                        |z| current.bound_with_grad(z, &xb, &yb, scale),
                        config.samples,
                        &mut baseline,
                        rng,
                    );
                    let est = in_phase(phase, epoch, est)?;
                    (est.logit_grad, est.param_grads, est.mean_value)
                }
                Estimator::Concrete => {
                    let est = concrete_gradient(model, post, &config.concrete, ppp_epoch, &xb, &yb, rng);
                    let est = in_phase(phase, epoch, est)?;
                    (est.logit_grad, est.param_grads, est.value)
                }
            };
            let (kl_value, kl_grad) = in_phase(phase, epoch, kl_and_grad(post, &prior))?;
            descend(model, &param_grads, &mut state, &rates);

            let ascent: Vec<f64> = logit_grad.iter().zip(&kl_grad).map(|(g, k)| g - k).collect();
            let mut logits = vec![Mat::from_column_slice(post.len(), 1, &post.logits)];
            let descent = [Mat::from_iterator(post.len(), 1, ascent.iter().map(|g| -g))];
            if adam_step(&mut logits, &descent, &mut logit_state, &[config.lr_logits]) {
                post.logits = logits[0].as_slice().to_vec();
            }
            total += value - kl_value;
            kl = kl_value;
        }
        history.records.push(EpochRecord {
            epoch,
            phase,
            elbo: total / batches.len() as f64,
            ppp_kl: kl,
            expected_m: post.cardinality_stats().0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

/// Runs pre-fit, point-process fit, extraction and post-fit on standardized
/// data. The prior is `p(Z) ∝ exp(-config.alpha |Z|^2)` over the candidates.
pub fn run_training(mut model: SvgpModel, x: &Mat, y: &Mat, config: &TrainConfig) -> Result<TrainOutcome> {
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if x.nrows() != y.nrows() || y.ncols() != 1 || x.ncols() != model.input_dim() {
        return Err(Error::Config(format!(
            "data shapes {:?} / {:?} do not fit a model with input dimension {}",
            x.shape(),
            y.shape(),
            model.input_dim()
        )));
    }
    model.mode = config.mode;
    config.validate(x.nrows())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory::default();
    let k = model.num_candidates();

    let full = SubsetIndex::full(k);
    fit_fixed(&mut model, &full, x, y, config, Phase::Pre, config.n_pre, &mut rng, &mut history)?;

    let mut posterior = PppPosterior::new(k);
    fit_ppp(&mut model, &mut posterior, x, y, config, &mut rng, &mut history)?;

    // an unfitted process carries no information about which points to drop
    let subset = if config.n_ppp == 0 {
        full
    } else {
        extract_subset(&posterior, config.extraction, &mut rng)
    };
    let mut pruned = if subset.len() == k {
        model
    } else {
        in_phase(Phase::Post, history.records.len(), model.restricted(&subset))?
    };
    let kept = SubsetIndex::full(pruned.num_candidates());
    fit_fixed(&mut pruned, &kept, x, y, config, Phase::Post, config.n_post, &mut rng, &mut history)?;

    Ok(TrainOutcome {
        model: pruned,
        posterior,
        subset,
        history,
    })
}
