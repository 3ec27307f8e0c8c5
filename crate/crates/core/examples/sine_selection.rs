//! Start from 50 candidate inducing points on a noisy sine and let the
//! point process decide how many to keep.
//!
//! cargo run --release --example sine_selection

use gpselect::adgrad::Mat;
use gpselect::data::{initial_candidates, Dataset};
use gpselect::gp::{BoundMode, SubsetIndex, SvgpModel};
use gpselect::trainer::{run_training, Phase, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> gpselect::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.sin() + 0.3 * (2.5 * x).sin() + 0.2 * e
        })
        .collect();
    let data = Dataset::from_raw(Mat::from_column_slice(n, 1, &xs), ys, "sine")?;

    let z = initial_candidates(&data.x, 50, 0);
    let config = TrainConfig::default();
    let out = run_training(SvgpModel::new(z.clone(), BoundMode::Collapsed)?, &data.x, &data.y, &config)?;

    let probs = out.posterior.probs();
    let (e, v) = out.posterior.cardinality_stats();
    println!("E|Z| = {e:.2} +- {:.2}, kept {} of 50", v.sqrt(), out.subset.len());
    for (k, p) in probs.iter().enumerate() {
        let at = data.stats.unstandardize_x(&z.rows(k, 1).into_owned())[(0, 0)];
        let mark = if out.subset.contains(k) { "*" } else { " " };
        println!("{mark} x = {at:6.2}  lambda = {p:.3}");
    }

    let baseline = TrainConfig {
        n_pre: 1000,
        n_ppp: 0,
        n_post: 0,
        ..config
    };
    let full = run_training(SvgpModel::new(z, BoundMode::Collapsed)?, &data.x, &data.y, &baseline)?;
    let kept = SubsetIndex::full(out.model.num_candidates());
    println!(
        "ELBO with {} points: {:.2}; with all 50: {:.2}",
        out.subset.len(),
        out.model.bound(&kept, &data.x, &data.y, 1.0)?,
        full.model.bound(&SubsetIndex::full(50), &data.x, &data.y, 1.0)?
    );
    let ppp: Vec<f64> = out.history.phase(Phase::Ppp).map(|r| r.expected_m).collect();
    println!("E during PPP: start {:.1}, middle {:.1}, end {:.1}", ppp[0], ppp[ppp.len() / 2], ppp[ppp.len() - 1]);
    Ok(())
}
