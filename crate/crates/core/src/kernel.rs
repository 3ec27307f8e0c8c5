//! RBF kernel with automatic relevance determination.
//!
//! `k(x, x') = v * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)` with every
//! hyperparameter stored on the log scale. The mean function is zero.

use serde::{Deserialize, Serialize};

use crate::adgrad::{AdError, Mat, Tape, Var};

/// Log-scale RBF-ARD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_variance: f64,
}

impl KernelParams {
    /// Unit lengthscales and unit variance.
    pub fn new(dim: usize) -> Self {
        Self {
            log_lengthscales: vec![0.0; dim],
            log_variance: 0.0,
        }
    }

    pub fn with_values(lengthscales: &[f64], variance: f64) -> Self {
        Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    /// Places the hyperparameters on `tape`, as leaves or constants.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> KernelVars<'t> {
        let ls = Mat::from_column_slice(self.dim(), 1, &self.log_lengthscales);
        let var = Mat::from_element(1, 1, self.log_variance);
        if trainable {
            KernelVars {
                log_lengthscales: tape.param(ls),
                log_variance: tape.param(var),
            }
        } else {
            KernelVars {
                log_lengthscales: tape.constant(ls),
                log_variance: tape.constant(var),
            }
        }
    }

    /// Gram matrix `K(x, x2)`.
    pub fn gram(&self, x: &Mat, x2: &Mat) -> Result<Mat, AdError> {
        let tape = Tape::new();
        let kv = self.register(&tape, false);
        let k = kv.gram(tape.constant(x.clone()), tape.constant(x2.clone()));
        tape.value(k)
    }

    /// Diagonal of `K(x, x)` in O(n).
    pub fn gram_diag(&self, x: &Mat) -> Vec<f64> {
        vec![self.variance(); x.nrows()]
    }
}

/// Kernel hyperparameters living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct KernelVars<'t> {
    pub log_lengthscales: Var<'t>,
    pub log_variance: Var<'t>,
}

impl<'t> KernelVars<'t> {
    fn scale_inputs(&self, x: Var<'t>) -> Var<'t> {
        let inv_ls = self.log_lengthscales.neg().exp().diag_embed();
        x.matmul(inv_ls)
    }

    /// Differentiable gram matrix between the rows of `a` and `b`.
    pub fn gram(&self, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let tape = a.tape();
        let d = self.log_lengthscales.shape().0;
        let bad = [a, b].into_iter().find(|v| v.shape().1 != d);
        if let Some(v) = bad {
            return tape.fail(AdError::ShapeMismatch {
                op: "gram",
                lhs: (d, 1),
                rhs: v.shape(),
            });
        }
        let sa = self.scale_inputs(a);
        let sb = self.scale_inputs(b);
        sa.sqdist(sb)
            .scale(-0.5)
            .exp()
            .mul_scalar(self.log_variance.exp())
    }

    /// Differentiable `diag(K(x, x))` as an `n x 1` column.
    pub fn diag(&self, n: usize) -> Var<'t> {
        let tape = self.log_variance.tape();
        tape.constant(Mat::from_element(n, 1, 1.0))
            .mul_scalar(self.log_variance.exp())
    }

    pub fn variance(&self) -> Var<'t> {
        self.log_variance.exp()
    }
}
