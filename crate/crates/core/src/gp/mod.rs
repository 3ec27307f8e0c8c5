//! Sparse variational GP over a candidate inducing set.
//!
//! The model holds the full candidate set `Z*` together with a variational
//! Gaussian `N(m*, S*)` over all candidate outputs. Every bound is evaluated
//! for an arbitrary [`SubsetIndex`] of the candidates; the uncollapsed bound
//! takes the marginal `N(m*[I], S*[I, I])` of the stored Gaussian.

mod bounds;
mod predict;

use serde::{Deserialize, Serialize};

use crate::adgrad::{cholesky_with_jitter, Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{KernelParams, KernelVars};

pub use bounds::{
    collapsed_bound_from_grams, collapsed_elbo, collapsed_elbo_expr, collapsed_q_u, exact_lml,
    exact_lml_expr, gaussian_kl, gaussian_kl_chol, uncollapsed_elbo, uncollapsed_elbo_expr,
    LN_2PI,
};
pub use predict::predict;

/// Which sparse bound a model optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    /// Titsias bound with the optimal `q(u)` substituted analytically.
    #[default]
    Collapsed,
    /// Hensman bound with free `(m, S)`; supports minibatches.
    Uncollapsed,
}

/// Sorted, distinct indices into the candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct SubsetIndex(Vec<usize>);

impl SubsetIndex {
    /// Validates and sorts `indices`; duplicates and out-of-range entries are errors.
    pub fn new(mut indices: Vec<usize>, candidates: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(&bad) = indices.iter().find(|&&i| i >= candidates) {
            return Err(Error::Config(format!(
                "subset index {bad} out of range for {candidates} candidates"
            )));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate subset index".into()));
        }
        Ok(Self(indices))
    }

    pub fn full(candidates: usize) -> Self {
        Self((0..candidates).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self(
            mask.iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
        )
    }

    pub fn to_mask(&self, candidates: usize) -> Vec<bool> {
        let mut mask = vec![false; candidates];
        for &i in &self.0 {
            mask[i] = true;
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }
}

/// Trainable parameter blocks of an [`SvgpModel`], in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    LogLengthscales = 0,
    LogVariance = 1,
    Inducing = 2,
    LogNoise = 3,
    QMu = 4,
    QSqrt = 5,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::LogLengthscales,
        Block::LogVariance,
        Block::Inducing,
        Block::LogNoise,
        Block::QMu,
        Block::QSqrt,
    ];
}

/// Sparse variational GP state.
///
/// `q_sqrt` stores the lower Cholesky factor of `S*` with its diagonal on the
/// log scale; entries above the diagonal are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpModel {
    pub inducing: Mat,
    pub kernel: KernelParams,
    pub log_noise: f64,
    pub q_mu: Mat,
    pub q_sqrt: Mat,
    pub mode: BoundMode,
}

impl SvgpModel {
    /// Unit hyperparameters, unit noise, `m* = 0` and `S* = K(Z*, Z*)`.
    pub fn new(inducing: Mat, mode: BoundMode) -> Result<Self> {
        if inducing.nrows() == 0 {
            return Err(Error::Config("candidate set must not be empty".into()));
        }
        let kernel = KernelParams::new(inducing.ncols());
        let k = inducing.nrows();
        let mut model = Self {
            inducing,
            kernel,
            log_noise: 0.0,
            q_mu: Mat::zeros(k, 1),
            q_sqrt: Mat::zeros(k, k),
            mode,
        };
        model.reset_q_to_prior()?;
        Ok(model)
    }

    /// Sets `S*` to the prior covariance `K(Z*, Z*)` and `m*` to zero.
    pub fn reset_q_to_prior(&mut self) -> Result<()> {
        let kzz = self.kernel.gram(&self.inducing, &self.inducing)?;
        let (l, _) = cholesky_with_jitter(&kzz)?;
        self.set_s_factor(&l);
        self.q_mu.fill(0.0);
        Ok(())
    }

    pub fn num_candidates(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.ncols()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Lower Cholesky factor of `S*`.
    pub fn s_factor(&self) -> Mat {
        let mut l = self.q_sqrt.lower_triangle();
        for i in 0..l.nrows() {
            l[(i, i)] = self.q_sqrt[(i, i)].exp();
        }
        l
    }

    pub fn set_s_factor(&mut self, l: &Mat) {
        let mut raw = l.lower_triangle();
        for i in 0..raw.nrows() {
            raw[(i, i)] = l[(i, i)].abs().max(1e-300).ln();
        }
        self.q_sqrt = raw;
    }

    /// Full candidate covariance `S*`.
    pub fn s_full(&self) -> Mat {
        let l = self.s_factor();
        &l * l.transpose()
    }

    /// Stores `(m, S)` for the candidates in `subset`, leaving the rest of
    /// `(m*, S*)` at the prior. Requires `subset` to cover every candidate
    /// when `S` is to be represented exactly.
    pub fn set_q(&mut self, m: &Mat, s: &Mat) -> Result<()> {
        let (l, _) = cholesky_with_jitter(s)?;
        self.q_mu.copy_from(m);
        self.set_s_factor(&l);
        Ok(())
    }

    /// Copy restricted to the candidates in `subset`.
    pub fn restricted(&self, subset: &SubsetIndex) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::Config("cannot restrict to an empty subset".into()));
        }
        let idx = subset.as_slice();
        let s_sub = {
            let full = self.s_full();
            full.select_rows(idx.iter()).select_columns(idx.iter())
        };
        let (l, _) = cholesky_with_jitter(&s_sub)?;
        let mut out = Self {
            inducing: self.inducing.select_rows(idx.iter()),
            kernel: self.kernel.clone(),
            log_noise: self.log_noise,
            q_mu: self.q_mu.select_rows(idx.iter()),
            q_sqrt: Mat::zeros(idx.len(), idx.len()),
            mode: self.mode,
        };
        out.set_s_factor(&l);
        Ok(out)
    }

    /// Parameter blocks in [`Block`] order.
    pub fn blocks(&self) -> Vec<Mat> {
        vec![
            Mat::from_column_slice(self.kernel.dim(), 1, &self.kernel.log_lengthscales),
            Mat::from_element(1, 1, self.kernel.log_variance),
            self.inducing.clone(),
            Mat::from_element(1, 1, self.log_noise),
            self.q_mu.clone(),
            self.q_sqrt.lower_triangle(),
        ]
    }

    pub fn set_blocks(&mut self, blocks: &[Mat]) {
        self.kernel.log_lengthscales = blocks[0].as_slice().to_vec();
        self.kernel.log_variance = blocks[1][(0, 0)];
        self.inducing.copy_from(&blocks[2]);
        self.log_noise = blocks[3][(0, 0)];
        self.q_mu.copy_from(&blocks[4]);
        self.q_sqrt = blocks[5].lower_triangle();
    }

    /// Registers every block as a differentiable leaf.
    pub fn register<'t>(&self, tape: &'t Tape) -> SvgpVars<'t> {
        let kernel = self.kernel.register(tape, true);
        let k = self.num_candidates();
        let mut strict = Mat::from_element(k, k, 1.0).lower_triangle();
        strict.fill_diagonal(0.0);
        SvgpVars {
            kernel,
            inducing: tape.param(self.inducing.clone()),
            log_noise: tape.scalar_param(self.log_noise),
            q_mu: tape.param(self.q_mu.clone()),
            q_sqrt: tape.param(self.q_sqrt.lower_triangle()),
            strict_lower: tape.constant(strict),
        }
    }

    /// Value of the model's bound for `subset` and its gradient per [`Block`].
    ///
    /// Collapsed models ignore `scale` and require the full data set.
    pub fn bound_with_grad(
        &self,
        subset: &SubsetIndex,
        x: &Mat,
        y: &Mat,
        scale: f64,
    ) -> Result<(f64, Vec<Mat>)> {
        let tape = Tape::new();
        let vars = self.register(&tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = match self.mode {
            BoundMode::Collapsed => collapsed_elbo_expr(&vars, subset, xv, yv),
            BoundMode::Uncollapsed => uncollapsed_elbo_expr(&vars, subset, xv, yv, scale),
        };
        let value = tape.scalar(out)?;
        let grads = tape.backward(out)?;
        Ok((value, vars.collect(&grads)))
    }

    /// Value of the model's bound for `subset`.
    pub fn bound(&self, subset: &SubsetIndex, x: &Mat, y: &Mat, scale: f64) -> Result<f64> {
        match self.mode {
            BoundMode::Collapsed => collapsed_elbo(self, subset, x, y),
            BoundMode::Uncollapsed => uncollapsed_elbo(self, subset, x, y, scale),
        }
    }

    /// Variational posterior over the outputs at `subset`: the optimal
    /// collapsed `q(u)` or the stored marginal of `N(m*, S*)`.
    pub fn q_u(&self, subset: &SubsetIndex, x: &Mat, y: &Mat) -> Result<(Mat, Mat)> {
        match self.mode {
            BoundMode::Collapsed => collapsed_q_u(self, subset, x, y),
            BoundMode::Uncollapsed => {
                let idx = subset.as_slice();
                let s = self.s_full();
                Ok((
                    self.q_mu.select_rows(idx.iter()),
                    s.select_rows(idx.iter()).select_columns(idx.iter()),
                ))
            }
        }
    }
}

/// Model parameters living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SvgpVars<'t> {
    pub kernel: KernelVars<'t>,
    pub inducing: Var<'t>,
    pub log_noise: Var<'t>,
    pub q_mu: Var<'t>,
    pub q_sqrt: Var<'t>,
    strict_lower: Var<'t>,
}

impl<'t> SvgpVars<'t> {
    /// Builds tape variables from explicit leaves (used by gradient checks).
    pub fn from_parts(
        kernel: KernelVars<'t>,
        inducing: Var<'t>,
        log_noise: Var<'t>,
        q_mu: Var<'t>,
        q_sqrt: Var<'t>,
    ) -> Self {
        let k = q_sqrt.shape().0;
        let mut strict = Mat::from_element(k, k, 1.0).lower_triangle();
        strict.fill_diagonal(0.0);
        Self {
            kernel,
            inducing,
            log_noise,
            q_mu,
            q_sqrt,
            strict_lower: inducing.tape().constant(strict),
        }
    }

    /// Lower factor of `S*`: strict lower part plus `exp` of the diagonal.
    pub fn s_factor(&self) -> Var<'t> {
        let off = self.q_sqrt.mul(self.strict_lower);
        let diag = self.q_sqrt.diag().exp().diag_embed();
        off + diag
    }

    /// Gradients for every [`Block`], zero-filled where unused.
    pub fn collect(&self, grads: &Gradients) -> Vec<Mat> {
        let mut q_sqrt = grads.wrt(self.q_sqrt);
        q_sqrt = q_sqrt.lower_triangle();
        vec![
            grads.wrt(self.kernel.log_lengthscales),
            grads.wrt(self.kernel.log_variance),
            grads.wrt(self.inducing),
            grads.wrt(self.log_noise),
            grads.wrt(self.q_mu),
            q_sqrt,
        ]
    }
}

#[cfg(test)]
mod tests;
