use crate::adgrad::{cholesky_with_jitter, Mat};
use crate::error::Result;

use super::{SubsetIndex, SvgpModel};

/// Latent predictive mean and variance at `x_test` under `q(u) = N(m, S)`.
///
/// `var_i = k(x_i, x_i) - b_i (K_MM - S) b_i^T` with `b_i = k(x_i, Z) K_MM^{-1}`.
/// Add the noise variance for the observation predictive.
pub fn predict(
    model: &SvgpModel,
    subset: &SubsetIndex,
    m: &Mat,
    s: &Mat,
    x_test: &Mat,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x_test.nrows();
    let kdiag = model.kernel.gram_diag(x_test);
    if subset.is_empty() {
        return Ok((vec![0.0; n], kdiag));
    }
    let z = model.inducing.select_rows(subset.as_slice().iter());
    let kmm = model.kernel.gram(&z, &z)?;
    let kmx = model.kernel.gram(&z, x_test)?;
    let (l, _) = cholesky_with_jitter(&kmm)?;
    let a = l.solve_lower_triangular(&kmx).expect("factor is invertible");
    let w = l.tr_solve_lower_triangular(&a).expect("factor is invertible");
    let mean = w.transpose() * m;
    let sw = s * &w;
    let var = (0..n)
        .map(|i| {
            let reduce = a.column(i).norm_squared();
            let restore = w.column(i).dot(&sw.column(i));
            (kdiag[i] - reduce + restore).max(0.0)
        })
        .collect();
    Ok((mean.column(0).iter().copied().collect(), var))
}
