//! Pathwise gradients through a relaxed mask next to score-function
//! gradients on the same model.
//!
//! cargo run --release --example concrete_relaxation

use gpselect::adgrad::Mat;
use gpselect::estimators::{concrete_gradient, sf_gradient, BaselineState, ConcreteConfig};
use gpselect::gp::{BoundMode, SvgpModel};
use gpselect::point_process::PppPosterior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gpselect::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Mat::from_fn(40, 1, |_, _| rng.random_range(-3.0..3.0));
    let y = Mat::from_fn(40, 1, |i, _| (1.5 * x[(i, 0)]).sin());
    let z = Mat::from_column_slice(6, 1, &[-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]);
    let model = SvgpModel::new(z, BoundMode::Collapsed)?;
    let post = PppPosterior::from_probs(&[0.5; 6]);

    let draws = 2000;
    let mut pathwise = vec![0.0; 6];
    for temperature in [1.0, 0.5, 0.1] {
        let config = ConcreteConfig::constant(temperature);
        pathwise.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..draws {
            let est = concrete_gradient(&model, &post, &config, 0, &x, &y, &mut rng)?;
            for (acc, g) in pathwise.iter_mut().zip(&est.logit_grad) {
                *acc += g / draws as f64;
            }
        }
        println!("tau {temperature:>4}: {}", fmt(&pathwise));
    }

    let mut baseline = BaselineState::new(0.9);
    let bound = |s: &gpselect::gp::SubsetIndex| model.bound_with_grad(s, &x, &y, 1.0);
    let mut score = vec![0.0; 6];
    for _ in 0..draws {
        let est = sf_gradient(&post, bound, 4, &mut baseline, &mut rng)?;
        for (acc, g) in score.iter_mut().zip(&est.logit_grad) {
            *acc += g / draws as f64;
        }
    }
    println!("score fn : {}", fmt(&score));
    Ok(())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|g| format!("{g:8.3}")).collect::<Vec<_>>().join(" ")
}
