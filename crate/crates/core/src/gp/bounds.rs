use crate::adgrad::{Mat, Tape, Var};
use crate::error::Result;
use crate::kernel::{KernelParams, KernelVars};

use super::{SubsetIndex, SvgpModel, SvgpVars};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Differentiable `log N(y | 0, K(X, X) + noise * I)`.
pub fn exact_lml_expr<'t>(kernel: &KernelVars<'t>, log_noise: Var<'t>, x: Var<'t>, y: Var<'t>) -> Var<'t> {
    let tape = x.tape();
    let n = x.shape().0;
    let eye = tape.constant(Mat::identity(n, n));
    let cov = kernel.gram(x, x) + eye.mul_scalar(log_noise.exp());
    let l = cov.cholesky();
    let alpha = l.solve_lower(y);
    (alpha.sum_sq() + l.logdet_chol()).scale(-0.5) - 0.5 * n as f64 * LN_2PI
}

/// Exact GP log marginal likelihood.
pub fn exact_lml(kernel: &KernelParams, noise_variance: f64, x: &Mat, y: &Mat) -> Result<f64> {
    let tape = Tape::new();
    let kv = kernel.register(&tape, false);
    let ln = tape.scalar_constant(noise_variance.ln());
    let out = exact_lml_expr(&kv, ln, tape.constant(x.clone()), tape.constant(y.clone()));
    Ok(tape.scalar(out)?)
}

/// `KL[N(m0, L0 L0^T) || N(m1, L1 L1^T)]` from Cholesky factors.
pub fn gaussian_kl_chol<'t>(m0: Var<'t>, l0: Var<'t>, m1: Var<'t>, l1: Var<'t>) -> Var<'t> {
    let k = m0.shape().0 as f64;
    let trace = l1.solve_lower(l0).sum_sq();
    let maha = l1.solve_lower(m1 - m0).sum_sq();
    (trace + maha + l1.logdet_chol() - l0.logdet_chol() - k).scale(0.5)
}

/// Multivariate normal KL divergence `KL[N(m0, S0) || N(m1, S1)]`.
pub fn gaussian_kl(m0: &Mat, s0: &Mat, m1: &Mat, s1: &Mat) -> Result<f64> {
    let tape = Tape::new();
    let l0 = tape.constant(s0.clone()).cholesky();
    let l1 = tape.constant(s1.clone()).cholesky();
    let out = gaussian_kl_chol(tape.constant(m0.clone()), l0, tape.constant(m1.clone()), l1);
    Ok(tape.scalar(out)?)
}

fn gaussian_expected_loglik<'t>(
    mean: Var<'t>,
    var: Var<'t>,
    y: Var<'t>,
    log_noise: Var<'t>,
) -> Var<'t> {
    // sum_i -0.5 log(2 pi s2) - ((mu_i - y_i)^2 + v_i) / (2 s2)
    let n = y.shape().0 as f64;
    let inv_s2 = log_noise.neg().exp();
    let resid = (mean - y).sum_sq() + var.sum();
    let logs = (log_noise + LN_2PI).scale(-0.5 * n);
    logs - resid.mul_scalar(inv_s2).scale(0.5)
}

/// Collapsed bound given the gram blocks.
///
/// `kmm` is `M x M` (`M >= 1`), `kmn` is `M x N`, `knn_trace` is `tr(K_NN)`.
pub fn collapsed_bound_from_grams<'t>(
    kmm: Var<'t>,
    kmn: Var<'t>,
    knn_trace: Var<'t>,
    y: Var<'t>,
    log_noise: Var<'t>,
) -> Var<'t> {
    let tape = y.tape();
    let (m, n) = kmn.shape();
    let inv_sigma = log_noise.scale(-0.5).exp();
    let inv_s2 = log_noise.neg().exp();
    let l = kmm.cholesky();
    let a = l.solve_lower(kmn).mul_scalar(inv_sigma);
    let aat = a.matmul(a.t());
    let b = aat + tape.constant(Mat::identity(m, m));
    let lb = b.cholesky();
    let c = lb.solve_lower(a.matmul(y)).mul_scalar(inv_sigma);

    let n = n as f64;
    let fit = y.sum_sq().mul_scalar(inv_s2) - c.sum_sq();
    let logdet = lb.logdet_chol() + log_noise.scale(n);
    let trace = knn_trace.mul_scalar(inv_s2) - aat.trace();
    (fit + logdet + trace).scale(-0.5) - 0.5 * n * LN_2PI
}

/// Collapsed bound with no inducing points.
fn empty_collapsed_bound<'t>(knn_trace: Var<'t>, y: Var<'t>, log_noise: Var<'t>) -> Var<'t> {
    let n = y.shape().0 as f64;
    let inv_s2 = log_noise.neg().exp();
    let logs = (log_noise + LN_2PI).scale(-0.5 * n);
    logs - (y.sum_sq() + knn_trace).mul_scalar(inv_s2).scale(0.5)
}

/// Differentiable collapsed (Titsias) bound for the candidates in `subset`.
pub fn collapsed_elbo_expr<'t>(
    vars: &SvgpVars<'t>,
    subset: &SubsetIndex,
    x: Var<'t>,
    y: Var<'t>,
) -> Var<'t> {
    let n = x.shape().0;
    let knn_trace = vars.kernel.diag(n).sum();
    if subset.is_empty() {
        return empty_collapsed_bound(knn_trace, y, vars.log_noise);
    }
    let z = vars.inducing.select_rows(subset.as_slice());
    let kmm = vars.kernel.gram(z, z);
    let kmn = vars.kernel.gram(z, x);
    collapsed_bound_from_grams(kmm, kmn, knn_trace, y, vars.log_noise)
}

/// Collapsed bound `L(Z)`; the empty subset gives the prior-only limit.
pub fn collapsed_elbo(model: &SvgpModel, subset: &SubsetIndex, x: &Mat, y: &Mat) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.register(&tape);
    let out = collapsed_elbo_expr(&vars, subset, tape.constant(x.clone()), tape.constant(y.clone()));
    Ok(tape.scalar(out)?)
}

/// Optimal `q(u) = N(m, S)` of the collapsed bound for `subset`.
pub fn collapsed_q_u(model: &SvgpModel, subset: &SubsetIndex, x: &Mat, y: &Mat) -> Result<(Mat, Mat)> {
    if subset.is_empty() {
        return Err(crate::error::Error::Config(
            "the optimal q(u) of an empty subset has no dimensions; use the empty-set bound".into(),
        ));
    }
    let tape = Tape::new();
    let kv = model.kernel.register(&tape, false);
    let z = tape.constant(model.inducing.select_rows(subset.as_slice().iter()));
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let m = subset.len();
    let inv_sigma = (-0.5 * model.log_noise).exp();

    let l = kv.gram(z, z).cholesky();
    let a = l.solve_lower(kv.gram(z, xv)).scale(inv_sigma);
    let b = a.matmul(a.t()) + tape.constant(Mat::identity(m, m));
    let lb = b.cholesky();
    let c = lb.solve_lower(a.matmul(yv)).scale(inv_sigma);
    // S = L B^{-1} L^T,  m = L LB^{-T} c
    let r = lb.solve_lower(l.t());
    let s = r.t().matmul(r);
    let mean = l.matmul(lb.solve_lower_t(c));
    Ok((tape.value(mean)?, tape.value(s)?))
}

/// Differentiable uncollapsed (Hensman) bound for `subset` on a batch.
///
/// The data term is multiplied by `scale`; the KL term is not.
pub fn uncollapsed_elbo_expr<'t>(
    vars: &SvgpVars<'t>,
    subset: &SubsetIndex,
    x: Var<'t>,
    y: Var<'t>,
    scale: f64,
) -> Var<'t> {
    let n = x.shape().0;
    let kdiag = vars.kernel.diag(n);
    if subset.is_empty() {
        let tape = x.tape();
        let zero_mean = tape.constant(Mat::zeros(n, 1));
        return gaussian_expected_loglik(zero_mean, kdiag, y, vars.log_noise).scale(scale);
    }
    let idx = subset.as_slice();
    let z = vars.inducing.select_rows(idx);
    let m = vars.q_mu.select_rows(idx);
    let ls = vars.s_factor().select_rows(idx);

    let kmm = vars.kernel.gram(z, z);
    let l = kmm.cholesky();
    let a = l.solve_lower(vars.kernel.gram(z, x));
    let w = l.solve_lower_t(a);
    let mean = w.t().matmul(m);
    let var = kdiag - a.square().col_sums().t() + ls.t().matmul(w).square().col_sums().t();
    let data = gaussian_expected_loglik(mean, var, y, vars.log_noise).scale(scale);

    let l_s = ls.matmul(ls.t()).cholesky();
    let prior_mean = x.tape().constant(Mat::zeros(idx.len(), 1));
    let kl = gaussian_kl_chol(m, l_s, prior_mean, l);
    data - kl
}

/// Uncollapsed bound with `(m, S)` taken from the model's stored `N(m*, S*)`.
pub fn uncollapsed_elbo(
    model: &SvgpModel,
    subset: &SubsetIndex,
    x: &Mat,
    y: &Mat,
    scale: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.register(&tape);
    let out = uncollapsed_elbo_expr(
        &vars,
        subset,
        tape.constant(x.clone()),
        tape.constant(y.clone()),
        scale,
    );
    Ok(tape.scalar(out)?)
}
