use super::{AdError, Mat, Tape, Var};

/// `|a - b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives one leaf per entry of `point` and must return a scalar node.
/// Returns the largest relative error over every leaf entry.
pub fn check_gradients<F>(f: F, point: &[Mat], step: f64) -> Result<f64, AdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |pt: &[Mat]| -> Result<f64, AdError> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = pt.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&tape, &leaves);
        tape.scalar(out)
    };

    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = point.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&tape, &leaves);
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut shifted: Vec<Mat> = point.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        for idx in 0..point[k].len() {
            let base = point[k][idx];
            shifted[k][idx] = base + step;
            let up = eval(&shifted)?;
            shifted[k][idx] = base - step;
            let down = eval(&shifted)?;
            shifted[k][idx] = base;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[idx], numeric));
        }
    }
    Ok(worst)
}
