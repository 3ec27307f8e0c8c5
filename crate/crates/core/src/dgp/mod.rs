//! Doubly-stochastic deep GP with its own candidate set and point process per
//! layer.
//!
//! Each layer is a sparse GP whose output dimensions share inducing inputs
//! but have separate inducing outputs `N(m_d, S_d)`. Hidden layers are
//! propagated by one reparameterized sample per point; the Gaussian
//! likelihood at the top is integrated in closed form.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adgrad::{cholesky_with_jitter, Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::estimators::{sf_gradient, BaselineState};
use crate::gp::{gaussian_kl_chol, BoundMode, SubsetIndex, SvgpModel, LN_2PI};
use crate::kernel::{KernelParams, KernelVars};
use crate::point_process::{kl_to_prior_expr, log_pmf_expr, PppPosterior, PriorSpec};
use crate::trainer::{
    adam_step, extract_subset, minibatch_iter, AdamState, EpochRecord, Phase, TrainConfig, TrainHistory,
};

/// Diagonal of `S` for hidden layers at initialization.
const HIDDEN_INIT_VARIANCE: f64 = 1e-5;
/// Keeps the marginal variance strictly positive before the square root.
const VARIANCE_FLOOR: f64 = 1e-12;
/// Fixed diagonal added to every layer's `K_MM` in models with two or more
/// layers, relative to the kernel variance. Candidates on a propagated
/// low-dimensional manifold make the plain Gram numerically singular. A
/// single layer is left exactly equal to the SVGP.
pub const DEEP_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub layers: usize,
    /// Width of every hidden layer.
    pub hidden_dim: usize,
    /// Candidates per layer.
    pub candidates: usize,
    /// Feed the observed input to the second layer alongside the first layer's output.
    pub concat_input: bool,
    /// Identity mean on hidden layers instead of zero.
    pub linear_mean: bool,
    /// Epochs of per-layer pretraining before the joint pre phase.
    pub layer_pretrain: usize,
    pub predict_samples: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 1,
            candidates: 25,
            concat_input: true,
            linear_mean: false,
            layer_pretrain: 200,
            predict_samples: 512,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.hidden_dim > 3 || self.candidates == 0 {
            return Err(Error::Config(
                "need at least one layer, hidden width in 1..=3 and candidates > 0".into(),
            ));
        }
        if self.predict_samples == 0 {
            return Err(Error::Config("predict_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// One sparse GP layer.
///
/// `q_sqrt[d]` is the lower factor of `S_d` with its diagonal on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpLayer {
    pub inducing: Mat,
    pub kernel: KernelParams,
    pub q_mu: Mat,
    pub q_sqrt: Vec<Mat>,
    pub linear_mean: bool,
}

fn log_diag_factor(l: &Mat) -> Mat {
    let mut raw = l.lower_triangle();
    for i in 0..raw.nrows() {
        raw[(i, i)] = l[(i, i)].abs().max(1e-300).ln();
    }
    raw
}

fn factor_from_raw(raw: &Mat) -> Mat {
    let mut l = raw.lower_triangle();
    for i in 0..l.nrows() {
        l[(i, i)] = raw[(i, i)].exp();
    }
    l
}

impl DgpLayer {
    /// Unit kernel; `S_d = K(Z, Z)` and `m_d = 0`.
    pub fn new(inducing: Mat, output_dim: usize) -> Result<Self> {
        let kernel = KernelParams::new(inducing.ncols());
        let kzz = kernel.gram(&inducing, &inducing)?;
        let (l, _) = cholesky_with_jitter(&kzz)?;
        let raw = log_diag_factor(&l);
        Ok(Self {
            q_mu: Mat::zeros(inducing.nrows(), output_dim),
            q_sqrt: vec![raw; output_dim],
            inducing,
            kernel,
            linear_mean: false,
        })
    }

    /// Near-deterministic identity map of the first `output_dim` inputs:
    /// `m_d = Z[:, d]` (or 0 with the identity mean) and small `S_d`.
    pub fn identity(inducing: Mat, output_dim: usize, linear_mean: bool) -> Result<Self> {
        let mut layer = Self::new(inducing, output_dim)?;
        let k = layer.num_candidates();
        for d in 0..output_dim {
            let source = d.min(layer.input_dim() - 1);
            for i in 0..k {
                layer.q_mu[(i, d)] = if linear_mean { 0.0 } else { layer.inducing[(i, source)] };
            }
        }
        let small = Mat::identity(k, k) * HIDDEN_INIT_VARIANCE.sqrt();
        layer.q_sqrt = vec![log_diag_factor(&small); output_dim];
        layer.linear_mean = linear_mean;
        Ok(layer)
    }

    pub fn num_candidates(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.q_mu.ncols()
    }

    pub fn s_factor(&self, d: usize) -> Mat {
        factor_from_raw(&self.q_sqrt[d])
    }

    pub fn set_q(&mut self, d: usize, m: &Mat, s: &Mat) -> Result<()> {
        let (l, _) = cholesky_with_jitter(s)?;
        self.q_mu.set_column(d, &m.column(0));
        self.q_sqrt[d] = log_diag_factor(&l);
        Ok(())
    }

    /// Copy restricted to the candidates in `subset`.
    pub fn restricted(&self, subset: &SubsetIndex) -> Result<Self> {
        let idx = subset.as_slice();
        if idx.is_empty() {
            return Err(Error::Config("cannot restrict a layer to no candidates".into()));
        }
        let q_sqrt = (0..self.output_dim())
            .map(|d| {
                let l = self.s_factor(d);
                let s = &l * l.transpose();
                let sub = s.select_rows(idx.iter()).select_columns(idx.iter());
                cholesky_with_jitter(&sub).map(|(l, _)| log_diag_factor(&l))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            inducing: self.inducing.select_rows(idx.iter()),
            kernel: self.kernel.clone(),
            q_mu: self.q_mu.select_rows(idx.iter()),
            q_sqrt,
            linear_mean: self.linear_mean,
        })
    }

    fn blocks(&self) -> Vec<Mat> {
        let mut out = vec![
            Mat::from_column_slice(self.kernel.dim(), 1, &self.kernel.log_lengthscales),
            Mat::from_element(1, 1, self.kernel.log_variance),
            self.inducing.clone(),
            self.q_mu.clone(),
        ];
        out.extend(self.q_sqrt.iter().map(|q| q.lower_triangle()));
        out
    }

    fn set_blocks(&mut self, blocks: &[Mat]) {
        self.kernel.log_lengthscales = blocks[0].as_slice().to_vec();
        self.kernel.log_variance = blocks[1][(0, 0)];
        self.inducing.copy_from(&blocks[2]);
        self.q_mu.copy_from(&blocks[3]);
        for (q, b) in self.q_sqrt.iter_mut().zip(&blocks[4..]) {
            *q = b.lower_triangle();
        }
    }

    fn num_blocks(&self) -> usize {
        4 + self.output_dim()
    }

    /// Builds the layer's variables from leaves laid out as [`DgpLayer::blocks`].
    fn vars_from<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>], deep: bool) -> LayerVars<'t> {
        let k = self.num_candidates();
        let mut strict = Mat::from_element(k, k, 1.0).lower_triangle();
        strict.fill_diagonal(0.0);
        LayerVars {
            kernel: KernelVars {
                log_lengthscales: leaves[0],
                log_variance: leaves[1],
            },
            inducing: leaves[2],
            q_mu: leaves[3],
            q_sqrt: leaves[4..self.num_blocks()].to_vec(),
            strict_lower: tape.constant(strict),
            linear_mean: self.linear_mean,
            jitter: if deep { DEEP_JITTER } else { 0.0 },
        }
    }
}

/// A layer's parameters on a tape.
#[derive(Debug, Clone)]
pub struct LayerVars<'t> {
    pub kernel: KernelVars<'t>,
    pub inducing: Var<'t>,
    pub q_mu: Var<'t>,
    pub q_sqrt: Vec<Var<'t>>,
    strict_lower: Var<'t>,
    pub linear_mean: bool,
    /// Relative diagonal added to `K_MM`.
    pub jitter: f64,
}

impl<'t> LayerVars<'t> {
    fn s_factor(&self, d: usize) -> Var<'t> {
        let raw = self.q_sqrt[d];
        raw.mul(self.strict_lower) + raw.diag().exp().diag_embed()
    }

    fn collect(&self, grads: &Gradients) -> Vec<Mat> {
        let mut out = vec![
            grads.wrt(self.kernel.log_lengthscales),
            grads.wrt(self.kernel.log_variance),
            grads.wrt(self.inducing),
            grads.wrt(self.q_mu),
        ];
        out.extend(self.q_sqrt.iter().map(|q| grads.wrt(*q).lower_triangle()));
        out
    }
}

/// Per-point Gaussian marginals of one layer and, for hidden layers, a sample.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput<'t> {
    /// `N x D` means.
    pub mean: Var<'t>,
    /// `N x D` variances.
    pub var: Var<'t>,
    /// `N x D` reparameterized draw, when noise was supplied.
    pub sample: Option<Var<'t>>,
    /// `sum_d KL[q(u_d) || p(u_d | Z)]` over the subset.
    pub kl: Var<'t>,
}

/// Marginals `mu_i = m(f_i) + alpha_i^T (m - m(Z))` and
/// `s_i = k(f_i, f_i) - alpha_i^T (K_MM - S) alpha_i`, `alpha_i = K_MM^{-1} k(Z, f_i)`,
/// for the candidates in `subset`, plus `mu + sqrt(s) * eps` when `eps` is given.
pub fn layer_propagate<'t>(
    layer: &LayerVars<'t>,
    subset: &SubsetIndex,
    inputs: Var<'t>,
    eps: Option<&Mat>,
) -> LayerOutput<'t> {
    let tape = inputs.tape();
    let idx = subset.as_slice();
    if idx.is_empty() {
        return LayerOutput {
            mean: tape.fail(crate::adgrad::AdError::Invalid("layer subset is empty".into())),
            var: tape.fail(crate::adgrad::AdError::Invalid("layer subset is empty".into())),
            sample: None,
            kl: tape.fail(crate::adgrad::AdError::Invalid("layer subset is empty".into())),
        };
    }
    let n = inputs.shape().0;
    let outputs = layer.q_mu.shape().1;
    let z = layer.inducing.select_rows(idx);
    let mut kzz = layer.kernel.gram(z, z);
    if layer.jitter > 0.0 {
        let eye = tape.constant(Mat::identity(idx.len(), idx.len()));
        kzz = kzz + eye.mul_scalar(layer.kernel.variance()).scale(layer.jitter);
    }
    let l = kzz.cholesky();
    let a = l.solve_lower(layer.kernel.gram(z, inputs));
    let w = l.solve_lower_t(a);
    let base_var = layer.kernel.diag(n) - a.square().col_sums().t();

    let mut means: Option<Var<'t>> = None;
    let mut vars: Option<Var<'t>> = None;
    let mut samples: Option<Var<'t>> = None;
    let mut kl: Option<Var<'t>> = None;
    let zero_prior = tape.constant(Mat::zeros(idx.len(), 1));
    for d in 0..outputs {
        let m = layer.q_mu.select_rows(idx).column(d);
        let ls = layer.s_factor(d).select_rows(idx);
        let (prior_z, prior_f) = if layer.linear_mean {
            (z.column(d), Some(inputs.column(d)))
        } else {
            (zero_prior, None)
        };
        let mut mu = w.t().matmul(m - prior_z);
        if let Some(pf) = prior_f {
            mu = mu + pf;
        }
        let var = base_var + ls.t().matmul(w).square().col_sums().t();
        let kl_d = gaussian_kl_chol(m, ls.matmul(ls.t()).cholesky(), prior_z, l);
        let join = |acc: Option<Var<'t>>, v: Var<'t>| Some(acc.map_or(v, |a| a.hcat(v)));
        if let Some(eps) = eps {
            let e = tape.column_constant(eps.column(d).as_slice());
            let draw = mu + (var + VARIANCE_FLOOR).sqrt().mul(e);
            samples = join(samples, draw);
        }
        means = join(means, mu);
        vars = join(vars, var);
        kl = Some(kl.map_or(kl_d, |k| k + kl_d));
    }
    LayerOutput {
        mean: means.expect("at least one output"),
        var: vars.expect("at least one output"),
        sample: samples,
        kl: kl.expect("at least one output"),
    }
}

/// Ordered layers with Gaussian noise on the top layer's single output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpModel {
    pub layers: Vec<DgpLayer>,
    pub log_noise: f64,
    pub concat_input: bool,
}

/// Model parameters on a tape.
#[derive(Debug, Clone)]
pub struct DgpVars<'t> {
    pub layers: Vec<LayerVars<'t>>,
    pub log_noise: Var<'t>,
}

impl DgpModel {
    /// Builds `config.layers` layers on standardized inputs `x`, each with
    /// `config.candidates` candidates drawn from the propagated inputs at
    /// initialization. Hidden layers start as identity maps.
    pub fn new(x: &Mat, config: &DgpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = x.ncols();
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let top = l + 1 == config.layers;
            let out_dim = if top { 1 } else { config.hidden_dim };
            // identity layers pass the first hidden_dim input columns forward
            let width = |cols: usize| cols.min(config.hidden_dim);
            let inputs = if l == 0 {
                x.clone()
            } else {
                let prev = x.columns(0, width(d).min(d)).into_owned();
                let mut h = Mat::zeros(x.nrows(), config.hidden_dim);
                for j in 0..config.hidden_dim {
                    h.set_column(j, &prev.column(j.min(prev.ncols() - 1)));
                }
                if l == 1 && config.concat_input {
                    let mut cat = Mat::zeros(x.nrows(), config.hidden_dim + d);
                    cat.columns_mut(0, config.hidden_dim).copy_from(&h);
                    cat.columns_mut(config.hidden_dim, d).copy_from(x);
                    cat
                } else {
                    h
                }
            };
            let k = config.candidates.min(x.nrows());
            let mut idx = rand::seq::index::sample(&mut rng, x.nrows(), k).into_vec();
            idx.sort_unstable();
            let z = inputs.select_rows(idx.iter());
            let layer = if top {
                DgpLayer::new(z, out_dim)?
            } else {
                DgpLayer::identity(z, out_dim, config.linear_mean)?
            };
            layers.push(layer);
        }
        Ok(Self {
            layers,
            log_noise: 0.0,
            concat_input: config.concat_input,
        })
    }

    /// Single-layer model with the same state as an uncollapsed SVGP.
    pub fn from_svgp(model: &SvgpModel) -> Self {
        Self {
            layers: vec![DgpLayer {
                inducing: model.inducing.clone(),
                kernel: model.kernel.clone(),
                q_mu: model.q_mu.clone(),
                q_sqrt: vec![model.q_sqrt.lower_triangle()],
                linear_mean: false,
            }],
            log_noise: model.log_noise,
            concat_input: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        self.layers.iter().map(DgpLayer::num_candidates).collect()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    /// All subsets full.
    pub fn full_subsets(&self) -> Vec<SubsetIndex> {
        self.layers.iter().map(|l| SubsetIndex::full(l.num_candidates())).collect()
    }

    /// Copy keeping only `subsets[l]` in layer `l`.
    pub fn restricted(&self, subsets: &[SubsetIndex]) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .zip(subsets)
            .map(|(l, s)| if s.len() == l.num_candidates() { Ok(l.clone()) } else { l.restricted(s) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            log_noise: self.log_noise,
            concat_input: self.concat_input,
        })
    }

    /// Parameter blocks: each layer's blocks in order, then the noise.
    pub fn blocks(&self) -> Vec<Mat> {
        let mut out: Vec<Mat> = self.layers.iter().flat_map(DgpLayer::blocks).collect();
        out.push(Mat::from_element(1, 1, self.log_noise));
        out
    }

    pub fn set_blocks(&mut self, blocks: &[Mat]) {
        let mut at = 0;
        for layer in &mut self.layers {
            let n = layer.num_blocks();
            layer.set_blocks(&blocks[at..at + n]);
            at += n;
        }
        self.log_noise = blocks[at][(0, 0)];
    }

    /// Layer owning each block (`None` for the noise), and whether it holds inducing inputs.
    fn block_layout(&self) -> Vec<(Option<usize>, bool)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for b in 0..layer.num_blocks() {
                out.push((Some(l), b == 2));
            }
        }
        out.push((None, false));
        out
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> DgpVars<'t> {
        let leaves: Vec<Var<'t>> = self.blocks().into_iter().map(|b| tape.param(b)).collect();
        self.vars_from(tape, &leaves)
    }

    /// Variables over leaves laid out as [`DgpModel::blocks`]; the model
    /// supplies only shapes and flags.
    pub fn vars_from<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>]) -> DgpVars<'t> {
        let mut at = 0;
        let mut layers = Vec::new();
        let deep = self.layers.len() > 1;
        for layer in &self.layers {
            layers.push(layer.vars_from(tape, &leaves[at..], deep));
            at += layer.num_blocks();
        }
        DgpVars {
            layers,
            log_noise: leaves[at],
        }
    }

    /// Standard normal noise for every hidden layer, `N x D_l` each.
    pub fn draw_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Mat> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| Mat::from_fn(n, l.output_dim(), |_, _| StandardNormal.sample(rng)))
            .collect()
    }
}

impl<'t> DgpVars<'t> {
    fn collect(&self, grads: &Gradients) -> Vec<Mat> {
        let mut out: Vec<Mat> = self.layers.iter().flat_map(|l| l.collect(grads)).collect();
        out.push(grads.wrt(self.log_noise));
        out
    }
}

/// Propagates `x` through the hidden layers with the given noise and
/// returns the top layer's marginals.
fn forward<'t>(vars: &DgpVars<'t>, subsets: &[SubsetIndex], x: Var<'t>, noise: &[Mat], concat: bool) -> LayerOutput<'t> {
    let last = vars.layers.len() - 1;
    let mut inputs = x;
    let mut kl: Option<Var<'t>> = None;
    for (l, layer) in vars.layers.iter().enumerate() {
        let eps = (l < last).then(|| &noise[l]);
        let out = layer_propagate(layer, &subsets[l], inputs, eps);
        kl = Some(kl.map_or(out.kl, |k| k + out.kl));
        if l == last {
            return LayerOutput {
                kl: kl.expect("set above"),
                ..out
            };
        }
        let sample = out.sample.expect("hidden layers are sampled");
        inputs = if l == 0 && concat { sample.hcat(x) } else { sample };
    }
    unreachable!("at least one layer")
}

/// One-sample estimate of the DGP bound on a batch: the scaled expected
/// log-likelihood given sampled hidden layers minus the summed inducing KLs.
pub fn dgp_elbo_expr<'t>(
    vars: &DgpVars<'t>,
    subsets: &[SubsetIndex],
    x: Var<'t>,
    y: Var<'t>,
    scale: f64,
    noise: &[Mat],
    concat: bool,
) -> Var<'t> {
    let top = forward(vars, subsets, x, noise, concat);
    let n = y.shape().0 as f64;
    let inv_s2 = vars.log_noise.neg().exp();
    let resid = (top.mean - y).sum_sq() + top.var.sum();
    let data = (vars.log_noise + LN_2PI).scale(-0.5 * n) - resid.mul_scalar(inv_s2).scale(0.5);
    data.scale(scale) - top.kl
}

fn check_subsets(model: &DgpModel, subsets: &[SubsetIndex]) -> Result<()> {
    if subsets.len() != model.num_layers() {
        return Err(Error::Config(format!(
            "{} subsets for {} layers",
            subsets.len(),
            model.num_layers()
        )));
    }
    if subsets.iter().any(SubsetIndex::is_empty) {
        return Err(Error::Config("every layer needs at least one inducing point".into()));
    }
    Ok(())
}

/// Value and per-block gradients of the bound at a fixed noise draw.
pub fn dgp_elbo_with_grad(
    model: &DgpModel,
    subsets: &[SubsetIndex],
    x: &Mat,
    y: &Mat,
    scale: f64,
    noise: &[Mat],
) -> Result<(f64, Vec<Mat>)> {
    check_subsets(model, subsets)?;
    let tape = Tape::new();
    let vars = model.register(&tape);
    let out = dgp_elbo_expr(
        &vars,
        subsets,
        tape.constant(x.clone()),
        tape.constant(y.clone()),
        scale,
        noise,
        model.concat_input,
    );
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok((value, vars.collect(&grads)))
}

/// One-sample Monte Carlo estimate of the bound.
pub fn dgp_elbo<R: Rng + ?Sized>(
    model: &DgpModel,
    subsets: &[SubsetIndex],
    x: &Mat,
    y: &Mat,
    scale: f64,
    rng: &mut R,
) -> Result<f64> {
    check_subsets(model, subsets)?;
    let noise = model.draw_noise(x.nrows(), rng);
    let tape = Tape::new();
    let vars = model.register(&tape);
    let out = dgp_elbo_expr(
        &vars,
        subsets,
        tape.constant(x.clone()),
        tape.constant(y.clone()),
        scale,
        &noise,
        model.concat_input,
    );
    Ok(tape.scalar(out)?)
}

/// KL of each layer's inducing outputs from their prior, summed over output dimensions.
pub fn layer_kls(model: &DgpModel, subsets: &[SubsetIndex]) -> Result<Vec<f64>> {
    check_subsets(model, subsets)?;
    let tape = Tape::new();
    let vars = model.register(&tape);
    let mut out = Vec::new();
    for (layer, subset) in vars.layers.iter().zip(subsets) {
        // the KL does not depend on the inputs; any single row will do
        let probe = tape.constant(Mat::zeros(1, layer.inducing.shape().1));
        out.push(tape.scalar(layer_propagate(layer, subset, probe, None).kl)?);
    }
    Ok(out)
}

/// Moment-matched predictive mean and latent variance from `n_samples`
/// propagated draws. Add [`DgpModel::noise_variance`] for observations.
pub fn dgp_predict(
    model: &DgpModel,
    subsets: &[SubsetIndex],
    x_test: &Mat,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_subsets(model, subsets)?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let n = x_test.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];
    for _ in 0..n_samples {
        let noise = model.draw_noise(n, &mut rng);
        let tape = Tape::new();
        let vars = model.register(&tape);
        let top = forward(&vars, subsets, tape.constant(x_test.clone()), &noise, model.concat_input);
        let mean = tape.value(top.mean)?;
        let var = tape.value(top.var)?;
        for i in 0..n {
            first[i] += mean[(i, 0)];
            second[i] += var[(i, 0)].max(0.0) + mean[(i, 0)].powi(2);
        }
    }
    let s = n_samples as f64;
    let mean: Vec<f64> = first.iter().map(|v| v / s).collect();
    let var = second.iter().zip(&mean).map(|(m2, m)| (m2 / s - m * m).max(0.0)).collect();
    Ok((mean, var))
}

/// Per-layer point processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPpp {
    pub layers: Vec<PppPosterior>,
}

impl LayerPpp {
    pub fn new(model: &DgpModel) -> Self {
        Self {
            layers: model.candidate_counts().into_iter().map(PppPosterior::new).collect(),
        }
    }

    /// Single process over the concatenated candidates of all layers.
    pub fn joint(&self) -> PppPosterior {
        PppPosterior::from_logits(self.layers.iter().flat_map(|p| p.logits.iter().copied()).collect())
    }

    /// Splits a subset of the concatenated candidates into per-layer subsets.
    pub fn split(&self, joint: &SubsetIndex) -> Vec<SubsetIndex> {
        let mut out = Vec::new();
        let mut offset = 0;
        for p in &self.layers {
            let idx: Vec<usize> = joint
                .as_slice()
                .iter()
                .filter(|&&k| k >= offset && k < offset + p.len())
                .map(|&k| k - offset)
                .collect();
            out.push(SubsetIndex::new(idx, p.len()).expect("in range by construction"));
            offset += p.len();
        }
        out
    }

    pub fn log_pmf(&self, subsets: &[SubsetIndex]) -> f64 {
        self.layers.iter().zip(subsets).map(|(p, s)| p.log_pmf(s)).sum()
    }

    pub fn expected_counts(&self) -> Vec<f64> {
        self.layers.iter().map(|p| p.cardinality_stats().0).collect()
    }

    fn set_joint_logits(&mut self, logits: &[f64]) {
        let mut at = 0;
        for p in &mut self.layers {
            let n = p.len();
            p.logits.copy_from_slice(&logits[at..at + n]);
            at += n;
        }
    }
}

/// Result of [`dgp_train`].
#[derive(Debug, Clone)]
pub struct DgpOutcome {
    pub model: DgpModel,
    pub posteriors: LayerPpp,
    /// Kept candidates per layer, indexed into the original candidate sets.
    pub subsets: Vec<SubsetIndex>,
    pub history: TrainHistory,
}

#[allow(clippy::too_many_arguments)]
fn train_phase<F>(
    model: &mut DgpModel,
    subsets: &[SubsetIndex],
    x: &Mat,
    y: &Mat,
    config: &TrainConfig,
    epochs: usize,
    phase: Phase,
    active: F,
    rng: &mut ChaCha8Rng,
    history: &mut TrainHistory,
) -> Result<()>
where
    F: Fn(Option<usize>, bool) -> bool,
{
    let n = x.nrows();
    let rates: Vec<f64> = model
        .block_layout()
        .into_iter()
        .map(|(layer, inducing)| if active(layer, inducing) { config.lr } else { 0.0 })
        .collect();
    let mut state = AdamState::new(&model.blocks());
    let expected: f64 = subsets.iter().map(|s| s.len() as f64).sum();
    for _ in 0..epochs {
        let epoch = history.records.len();
        let start = Instant::now();
        let batches = minibatch_iter(n, config.minibatch, BoundMode::Uncollapsed, rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let scale = n as f64 / batch.len() as f64;
            let xb = x.select_rows(batch.iter());
            let yb = y.select_rows(batch.iter());
            let noise = model.draw_noise(batch.len(), rng);
            let (value, grads) = dgp_elbo_with_grad(model, subsets, &xb, &yb, scale, &noise)
                .map_err(|e| training_error(phase, epoch, e))?;
            step(model, &grads, &mut state, &rates);
            total += value;
        }
        history.records.push(EpochRecord {
            epoch,
            phase,
            elbo: total / batches.len() as f64,
            ppp_kl: 0.0,
            expected_m: expected,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

fn training_error(phase: Phase, epoch: usize, e: Error) -> Error {
    Error::Training {
        phase: phase.to_string(),
        epoch,
        source: Box::new(e),
    }
}

fn step(model: &mut DgpModel, ascent: &[Mat], state: &mut AdamState, rates: &[f64]) {
    let mut params = model.blocks();
    let grads: Vec<Mat> = ascent.iter().map(|g| -g).collect();
    if adam_step(&mut params, &grads, state, rates) {
        model.set_blocks(&params);
    }
}

/// Summed per-layer KL of the point processes and its gradient over the joint logits.
fn ppp_kl_and_grad(ppp: &LayerPpp, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let mut total: Option<Var<'_>> = None;
    let mut leaves = Vec::new();
    for p in &ppp.layers {
        let logits = p.register(&tape);
        leaves.push(logits);
        let kl = kl_to_prior_expr(logits, &PriorSpec::new(alpha, p.len()));
        total = Some(total.map_or(kl, |t| t + kl));
    }
    let total = total.expect("at least one layer");
    let value = tape.scalar(total)?;
    let grads = tape.backward(total)?;
    Ok((value, leaves.iter().flat_map(|l| grads.wrt(*l).as_slice().to_vec()).collect()))
}

/// Differentiable joint `log q` over layers, for checks.
pub fn joint_log_pmf_expr<'t>(logits: &[Var<'t>], subsets: &[SubsetIndex]) -> Var<'t> {
    logits
        .iter()
        .zip(subsets)
        .map(|(l, s)| log_pmf_expr(*l, s))
        .reduce(|a, b| a + b)
        .expect("at least one layer")
}

/// Layer-wise pretraining, joint pre-fit, point-process fit with a shared
/// `alpha` per layer, per-layer extraction and post-fit.
pub fn dgp_train(mut model: DgpModel, x: &Mat, y: &Mat, dgp: &DgpConfig, config: &TrainConfig) -> Result<DgpOutcome> {
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    dgp.validate()?;
    let train = TrainConfig {
        mode: BoundMode::Uncollapsed,
        ..config.clone()
    };
    train.validate(x.nrows())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut history = TrainHistory::default();
    let full = model.full_subsets();

    for l in 0..model.num_layers() {
        let active = |layer: Option<usize>, _| layer == Some(l) || layer.is_none();
        train_phase(&mut model, &full, x, y, &train, dgp.layer_pretrain, Phase::Pre, active, &mut rng, &mut history)?;
    }
    train_phase(&mut model, &full, x, y, &train, train.n_pre, Phase::Pre, |_, _| true, &mut rng, &mut history)?;

    let mut ppp = LayerPpp::new(&model);
    let z_frozen = !train.optimize_z_during_ppp;
    let rates: Vec<f64> = model
        .block_layout()
        .into_iter()
        .map(|(_, inducing)| if inducing && z_frozen { 0.0 } else { train.lr })
        .collect();
    let mut state = AdamState::new(&model.blocks());
    let total_k: usize = model.candidate_counts().iter().sum();
    let mut logit_state = AdamState::new(&[Mat::zeros(total_k, 1)]);
    let mut baseline = BaselineState::new(train.baseline_decay);
    let n = x.nrows();
    for _ in 0..train.n_ppp {
        let epoch = history.records.len();
        let start = Instant::now();
        let batches = minibatch_iter(n, train.minibatch, BoundMode::Uncollapsed, &mut rng)?;
        let mut total = 0.0;
        let mut kl = 0.0;
        for batch in &batches {
            let scale = n as f64 / batch.len() as f64;
            let xb = x.select_rows(batch.iter());
            let yb = y.select_rows(batch.iter());
            // one noise draw shared by the S subset samples of this step
            let noise = model.draw_noise(batch.len(), &mut rng);
            let joint = ppp.joint();
            let current = &model;
            let bound = |z: &SubsetIndex| {
                let subsets = ppp.split(z);
                if subsets.iter().any(SubsetIndex::is_empty) {
                    // a layer with no inducing points has no defined output
                    return Err(Error::Config("empty layer".into()));
                }
                dgp_elbo_with_grad(current, &subsets, &xb, &yb, scale, &noise)
            };
            let est = sample_nonempty(&joint, &ppp, bound, train.samples, &mut baseline, &mut rng)
                .map_err(|e| training_error(Phase::Ppp, epoch, e))?;
            let (kl_value, kl_grad) = ppp_kl_and_grad(&ppp, train.alpha).map_err(|e| training_error(Phase::Ppp, epoch, e))?;
            step(&mut model, &est.param_grads, &mut state, &rates);
            let descent = Mat::from_iterator(total_k, 1, est.logit_grad.iter().zip(&kl_grad).map(|(g, k)| k - g));
            let mut logits = vec![Mat::from_column_slice(total_k, 1, &joint.logits)];
            if adam_step(&mut logits, &[descent], &mut logit_state, &[train.lr_logits]) {
                ppp.set_joint_logits(logits[0].as_slice());
            }
            total += est.mean_value - kl_value;
            kl = kl_value;
        }
        history.records.push(EpochRecord {
            epoch,
            phase: Phase::Ppp,
            elbo: total / batches.len() as f64,
            ppp_kl: kl,
            expected_m: ppp.expected_counts().iter().sum(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let subsets: Vec<SubsetIndex> = if train.n_ppp == 0 {
        full
    } else {
        ppp.layers.iter().map(|p| extract_subset(p, train.extraction, &mut rng)).collect()
    };
    let mut pruned = model.restricted(&subsets)?;
    let kept = pruned.full_subsets();
    train_phase(&mut pruned, &kept, x, y, &train, train.n_post, Phase::Post, |_, _| true, &mut rng, &mut history)?;
    Ok(DgpOutcome {
        model: pruned,
        posteriors: ppp,
        subsets,
        history,
    })
}

/// Score-function step over the joint process. Draws in which some layer
/// is empty have no defined bound; they are redrawn, which conditions `q`
/// on every layer being non-empty.
fn sample_nonempty<F>(
    joint: &PppPosterior,
    ppp: &LayerPpp,
    bound: F,
    samples: usize,
    baseline: &mut BaselineState,
    rng: &mut ChaCha8Rng,
) -> Result<crate::estimators::SfEstimate>
where
    F: Fn(&SubsetIndex) -> Result<(f64, Vec<Mat>)> + Sync,
{
    const MAX_TRIES: usize = 100;
    for _ in 0..MAX_TRIES {
        let mut probe = rng.clone();
        let draws: Vec<SubsetIndex> = (0..samples).map(|_| joint.sample(&mut probe)).collect();
        if draws.iter().all(|z| ppp.split(z).iter().all(|s| !s.is_empty())) {
            return sf_gradient(joint, &bound, samples, baseline, rng);
        }
        *rng = probe;
    }
    Err(Error::Config("could not draw subsets with every layer non-empty".into()))
}
