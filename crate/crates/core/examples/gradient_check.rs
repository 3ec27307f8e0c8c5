//! Reverse-mode gradients of the collapsed bound against central differences.
//!
//! cargo run --release --example gradient_check

use gpselect::adgrad::{check_gradients, Mat};
use gpselect::gp::{collapsed_elbo_expr, BoundMode, SubsetIndex, SvgpModel, SvgpVars};
use gpselect::kernel::KernelVars;
use gpselect::point_process::{kl_to_prior_expr, PriorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gpselect::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Mat::from_fn(12, 2, |_, _| rng.random_range(-2.0..2.0));
    let y = Mat::from_fn(12, 1, |i, _| x[(i, 0)] - x[(i, 1)].powi(2));
    let model = SvgpModel::new(x.rows(0, 5).into_owned(), BoundMode::Collapsed)?;
    let subset = SubsetIndex::new(vec![0, 1, 3], 5)?;

    let point = vec![
        Mat::from_column_slice(2, 1, &[0.1, -0.2]),
        Mat::from_element(1, 1, 0.3),
        model.inducing.clone(),
        Mat::from_element(1, 1, -1.5),
    ];
    let err = check_gradients(
        |t, v| {
            let vars = SvgpVars::from_parts(
                KernelVars {
                    log_lengthscales: v[0],
                    log_variance: v[1],
                },
                v[2],
                v[3],
                t.constant(model.q_mu.clone()),
                t.constant(model.q_sqrt.clone()),
            );
            collapsed_elbo_expr(&vars, &subset, t.constant(x.clone()), t.constant(y.clone()))
        },
        &point,
        1e-5,
    )?;
    println!("collapsed bound: worst relative error {err:.2e}");

    let logits = Mat::from_fn(10, 1, |_, _| rng.random_range(-3.0..3.0));
    let prior = PriorSpec::new(0.3, 10);
    let err = check_gradients(|_, v| kl_to_prior_expr(v[0], &prior), &[logits], 1e-5)?;
    println!("point-process KL: worst relative error {err:.2e}");
    Ok(())
}
