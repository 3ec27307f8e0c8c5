//! Reverse-mode differentiation over dense matrix expressions.
//!
//! A [`Tape`] records every operation eagerly: each [`Var`] carries its forward
//! value the moment it is created, and [`Tape::backward`] walks the record in
//! reverse to produce a [`Gradients`] map over the leaves. Scalars are `1x1`
//! matrices.
//!
//! Shape mismatches and Cholesky failures do not panic. The first failure
//! poisons the tape: later operations become no-ops and the error is reported
//! by [`Tape::value`], [`Tape::scalar`] and [`Tape::backward`].
//!
//! A tape is meant to be rebuilt for every evaluation; nothing is cached
//! between tapes.

mod backward;
mod check;

use std::cell::{Ref, RefCell};
use std::ops;

use nalgebra::DMatrix;

pub use crate::error::AdError;
pub use check::{check_gradients, relative_error};

pub type Mat = DMatrix<f64>;

/// Base jitter relative to the mean diagonal, escalated 10x per retry.
pub const JITTER_BASE: f64 = 1e-6;
pub const JITTER_RETRIES: usize = 3;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Poison,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MulScalar(usize, usize),
    Hadamard(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Logistic(usize),
    LogSigmoid(usize),
    Square(usize),
    Sum(usize),
    Trace(usize),
    DiagPart(usize),
    DiagEmbed(usize),
    Cholesky(usize),
    SolveLower { l: usize, b: usize, transpose: bool },
    LogDetChol(usize),
    SqDist(usize, usize),
    SelectRows(usize, Vec<usize>),
    Column(usize, usize),
    HCat(usize, usize),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Mat,
    pub(crate) needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    error: RefCell<Option<AdError>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shape = self.shape();
        write!(f, "Var#{}{:?}", self.id, shape)
    }
}

/// Gradients of a scalar output with respect to every node that feeds it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Mat> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Mat {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Mat::zeros(r, c)
            }
        }
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn mismatch(op: &'static str, a: &Mat, b: &Mat) -> AdError {
    AdError::ShapeMismatch {
        op,
        lhs: shape(a),
        rhs: shape(b),
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(x))` without overflow for large |x|.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &Mat) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Cholesky factor of `a` with the escalating jitter policy.
///
/// Returns the lower factor and the jitter that was added to the diagonal.
pub fn cholesky_with_jitter(a: &Mat) -> Result<(Mat, f64), AdError> {
    if !a.is_square() {
        return Err(mismatch("cholesky", a, a));
    }
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok((c.l(), 0.0));
    }
    let mean_diag = if n == 0 {
        1.0
    } else {
        sym.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64
    };
    let mut jitter = JITTER_BASE * mean_diag.max(f64::MIN_POSITIVE);
    for _ in 0..JITTER_RETRIES {
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = shifted.cholesky() {
            log::debug!("cholesky succeeded with jitter {jitter:e}");
            return Ok((c.l(), jitter));
        }
        jitter *= 10.0;
    }
    Err(AdError::NotPositiveDefinite {
        dim: n,
        jitter: jitter / 10.0,
        min_eigenvalue: min_eigenvalue(a),
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First error recorded on this tape, if any.
    pub fn error(&self) -> Option<AdError> {
        self.error.borrow().clone()
    }

    fn push(&self, op: Op, value: Mat, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar_param(&self, value: f64) -> Var<'_> {
        self.param(Mat::from_element(1, 1, value))
    }

    pub fn scalar_constant(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    pub fn column_constant(&self, values: &[f64]) -> Var<'_> {
        self.constant(Mat::from_column_slice(values.len(), 1, values))
    }

    fn apply<F>(&self, op: Op, inputs: &[usize], f: F) -> Var<'_>
    where
        F: FnOnce(&[Node]) -> Result<Mat, AdError>,
    {
        if self.error.borrow().is_some() {
            return self.push(Op::Poison, Mat::zeros(0, 0), false);
        }
        let (result, needs_grad) = {
            let nodes = self.nodes.borrow();
            let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
            (f(&nodes), needs_grad)
        };
        match result {
            Ok(value) => self.push(op, value, needs_grad),
            Err(e) => {
                *self.error.borrow_mut() = Some(e);
                self.push(Op::Poison, Mat::zeros(0, 0), false)
            }
        }
    }

    /// Poisons the tape with `err` unless it already holds an error.
    pub fn fail(&self, err: AdError) -> Var<'_> {
        self.apply(Op::Poison, &[], |_| Err(err))
    }

    /// Forward value of `var`.
    pub fn value(&self, var: Var<'_>) -> Result<Mat, AdError> {
        if let Some(e) = self.error() {
            return Err(e);
        }
        Ok(self.nodes.borrow()[var.id].value.clone())
    }

    /// Forward value of a `1x1` node.
    pub fn scalar(&self, var: Var<'_>) -> Result<f64, AdError> {
        if let Some(e) = self.error() {
            return Err(e);
        }
        let nodes = self.nodes.borrow();
        let v = &nodes[var.id].value;
        if shape(v) != (1, 1) {
            return Err(AdError::NonScalarOutput(shape(v)));
        }
        Ok(v[(0, 0)])
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Gradients of the scalar `output` with respect to all nodes.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AdError> {
        if let Some(e) = self.error() {
            return Err(e);
        }
        backward::run(self, output.id)
    }
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $variant:ident, $f:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Var<'t> {
            let a = self.id;
            self.tape.apply(Op::$variant(a), &[a], |n| Ok(n[a].value.map($f)))
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        shape(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn value(&self) -> Result<Mat, AdError> {
        self.tape.value(*self)
    }

    pub fn scalar(&self) -> Result<f64, AdError> {
        self.tape.scalar(*self)
    }

    fn binary_same<F>(self, other: Var<'t>, name: &'static str, op: Op, f: F) -> Var<'t>
    where
        F: FnOnce(&Mat, &Mat) -> Mat,
    {
        let (a, b) = (self.id, other.id);
        self.tape.apply(op, &[a, b], |n| {
            let (x, y) = (&n[a].value, &n[b].value);
            if shape(x) != shape(y) {
                return Err(mismatch(name, x, y));
            }
            Ok(f(x, y))
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    /// Elementwise product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary_same(other, "hadamard", Op::Hadamard(self.id, other.id), |x, y| {
            x.component_mul(y)
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::Neg(a), &[a], |n| Ok(-&n[a].value))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let a = self.id;
        self.tape
            .apply(Op::Scale(a, factor), &[a], |n| Ok(&n[a].value * factor))
    }

    /// Adds a constant to every entry.
    pub fn offset(self, c: f64) -> Var<'t> {
        let a = self.id;
        self.tape
            .apply(Op::Offset(a), &[a], |n| Ok(n[a].value.add_scalar(c)))
    }

    /// Multiplies every entry by a `1x1` variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, s.id);
        self.tape.apply(Op::MulScalar(a, b), &[a, b], |n| {
            let sv = &n[b].value;
            if shape(sv) != (1, 1) {
                return Err(mismatch("mul_scalar", &n[a].value, sv));
            }
            Ok(&n[a].value * sv[(0, 0)])
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.tape.apply(Op::MatMul(a, b), &[a, b], |n| {
            let (x, y) = (&n[a].value, &n[b].value);
            if x.ncols() != y.nrows() {
                return Err(mismatch("matmul", x, y));
            }
            Ok(x * y)
        })
    }

    pub fn t(self) -> Var<'t> {
        let a = self.id;
        self.tape
            .apply(Op::Transpose(a), &[a], |n| Ok(n[a].value.transpose()))
    }

    unary!(exp, Exp, f64::exp);
    unary!(ln, Log, f64::ln);
    unary!(sqrt, Sqrt, f64::sqrt);
    unary!(
        /// Elementwise `1 / (1 + exp(-x))`.
        logistic,
        Logistic,
        logistic
    );
    unary!(
        /// Elementwise `log(logistic(x))`, stable for saturated inputs.
        log_sigmoid,
        LogSigmoid,
        log_sigmoid
    );
    unary!(square, Square, |x| x * x);

    pub fn sum(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::Sum(a), &[a], |n| {
            Ok(Mat::from_element(1, 1, n[a].value.sum()))
        })
    }

    pub fn trace(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::Trace(a), &[a], |n| {
            let v = &n[a].value;
            if !v.is_square() {
                return Err(mismatch("trace", v, v));
            }
            Ok(Mat::from_element(1, 1, v.trace()))
        })
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::DiagPart(a), &[a], |n| {
            let v = &n[a].value;
            if !v.is_square() {
                return Err(mismatch("diag", v, v));
            }
            let d = v.diagonal();
            Ok(Mat::from_column_slice(d.len(), 1, d.as_slice()))
        })
    }

    /// Square diagonal matrix from a column.
    pub fn diag_embed(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::DiagEmbed(a), &[a], |n| {
            let v = &n[a].value;
            if v.ncols() != 1 {
                return Err(mismatch("diag_embed", v, v));
            }
            Ok(Mat::from_diagonal(&v.column(0).into_owned()))
        })
    }

    /// Lower Cholesky factor, with jitter escalation on failure.
    pub fn cholesky(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::Cholesky(a), &[a], |n| {
            cholesky_with_jitter(&n[a].value).map(|(l, _)| l)
        })
    }

    /// `L^{-1} B` for lower-triangular `self`.
    pub fn solve_lower(self, rhs: Var<'t>) -> Var<'t> {
        self.solve(rhs, false)
    }

    /// `L^{-T} B` for lower-triangular `self`.
    pub fn solve_lower_t(self, rhs: Var<'t>) -> Var<'t> {
        self.solve(rhs, true)
    }

    fn solve(self, rhs: Var<'t>, transpose: bool) -> Var<'t> {
        let (l, b) = (self.id, rhs.id);
        self.tape
            .apply(Op::SolveLower { l, b, transpose }, &[l, b], |n| {
                let (lv, bv) = (&n[l].value, &n[b].value);
                if !lv.is_square() || lv.nrows() != bv.nrows() {
                    return Err(mismatch("solve_lower", lv, bv));
                }
                let out = if transpose {
                    lv.tr_solve_lower_triangular(bv)
                } else {
                    lv.solve_lower_triangular(bv)
                };
                out.ok_or_else(|| AdError::Invalid("singular triangular factor".into()))
            })
    }

    /// `2 * sum(log(diag(L)))` for a Cholesky factor `L`.
    pub fn logdet_chol(self) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::LogDetChol(a), &[a], |n| {
            let v = &n[a].value;
            if !v.is_square() {
                return Err(mismatch("logdet_chol", v, v));
            }
            let s: f64 = v.diagonal().iter().map(|d| d.ln()).sum();
            Ok(Mat::from_element(1, 1, 2.0 * s))
        })
    }

    /// Log-determinant of an SPD matrix via its Cholesky factor.
    pub fn logdet(self) -> Var<'t> {
        self.cholesky().logdet_chol()
    }

    /// Pairwise squared Euclidean distances between rows.
    pub fn sqdist(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.tape.apply(Op::SqDist(a, b), &[a, b], |n| {
            let (x, y) = (&n[a].value, &n[b].value);
            if x.ncols() != y.ncols() {
                return Err(mismatch("sqdist", x, y));
            }
            Ok(Mat::from_fn(x.nrows(), y.nrows(), |i, j| {
                let mut s = 0.0;
                for d in 0..x.ncols() {
                    let diff = x[(i, d)] - y[(j, d)];
                    s += diff * diff;
                }
                s
            }))
        })
    }

    /// Rows at `idx`, in order.
    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let a = self.id;
        let owned = idx.to_vec();
        self.tape.apply(Op::SelectRows(a, owned), &[a], |n| {
            let v = &n[a].value;
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.nrows()) {
                return Err(AdError::Invalid(format!(
                    "row index {bad} out of range for {} rows",
                    v.nrows()
                )));
            }
            Ok(v.select_rows(idx.iter()))
        })
    }

    /// Column `j` as an `n x 1` matrix.
    pub fn column(self, j: usize) -> Var<'t> {
        let a = self.id;
        self.tape.apply(Op::Column(a, j), &[a], |n| {
            let v = &n[a].value;
            if j >= v.ncols() {
                return Err(AdError::Invalid(format!(
                    "column {j} out of range for {} columns",
                    v.ncols()
                )));
            }
            Ok(Mat::from_column_slice(v.nrows(), 1, v.column(j).as_slice()))
        })
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.tape.apply(Op::HCat(a, b), &[a, b], |n| {
            let (x, y) = (&n[a].value, &n[b].value);
            if x.nrows() != y.nrows() {
                return Err(mismatch("hcat", x, y));
            }
            let mut out = Mat::zeros(x.nrows(), x.ncols() + y.ncols());
            out.columns_mut(0, x.ncols()).copy_from(x);
            out.columns_mut(x.ncols(), y.ncols()).copy_from(y);
            Ok(out)
        })
    }

    /// `x^T A x` for a column `x`.
    pub fn quad_form(self, a: Var<'t>) -> Var<'t> {
        self.t().matmul(a).matmul(self)
    }

    /// Sum of squared entries.
    pub fn sum_sq(self) -> Var<'t> {
        self.square().sum()
    }

    /// Column sums as a `1 x n` row.
    pub fn col_sums(self) -> Var<'t> {
        let (r, _) = self.shape();
        let ones = self.tape.constant(Mat::from_element(1, r, 1.0));
        ones.matmul(self)
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.offset(-rhs)
    }
}

#[cfg(test)]
mod tests;
