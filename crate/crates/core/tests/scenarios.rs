//! End-to-end training runs on small synthetic problems.

use gpselect::adgrad::Mat;
use gpselect::data::{initial_candidates, square_wave, Dataset};
use gpselect::dgp::{dgp_train, DgpConfig, DgpModel};
use gpselect::gp::{BoundMode, SubsetIndex, SvgpModel};
use gpselect::trainer::{run_training, Phase, TrainConfig, TrainHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sine(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..10.0)).collect();
    let ys = xs
        .iter()
        .map(|x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.sin() + 0.3 * (2.5 * x).sin() + 0.2 * e
        })
        .collect();
    Dataset::from_raw(Mat::from_column_slice(200, 1, &xs), ys, "sine").unwrap()
}

/// Means of consecutive non-overlapping windows.
fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values.chunks_exact(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
}

/// Standard errors of the window means, treating epochs as independent.
fn window_ses(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks_exact(width)
        .map(|w| {
            let m = w.iter().sum::<f64>() / width as f64;
            let var = w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (width - 1) as f64;
            (var / width as f64).sqrt()
        })
        .collect()
}

fn ppp_objective(history: &TrainHistory) -> Vec<f64> {
    history.phase(Phase::Ppp).map(|r| r.elbo).collect()
}

#[test]
fn sine_keeps_few_points_at_no_cost() {
    let data = sine(0);
    let z = initial_candidates(&data.x, 50, 0);
    let config = TrainConfig::default();
    let out = run_training(SvgpModel::new(z.clone(), BoundMode::Collapsed).unwrap(), &data.x, &data.y, &config).unwrap();
    let baseline = TrainConfig {
        n_pre: 1000,
        n_ppp: 0,
        n_post: 0,
        ..config
    };
    let full = run_training(SvgpModel::new(z, BoundMode::Collapsed).unwrap(), &data.x, &data.y, &baseline).unwrap();

    let kept = out.model.bound(&SubsetIndex::full(out.model.num_candidates()), &data.x, &data.y, 1.0).unwrap();
    let all = full.model.bound(&SubsetIndex::full(50), &data.x, &data.y, 1.0).unwrap();
    assert!(out.subset.len() < 15, "kept {}", out.subset.len());
    assert!(kept > all - 0.5, "{kept} vs {all}");

    // the objective is a Monte Carlo estimate; a decrease has to exceed its noise
    let objective = ppp_objective(&out.history);
    let means = window_means(&objective, 50);
    let ses = window_ses(&objective, 50);
    for j in 1..means.len() {
        let slack = 3.0 * (ses[j].powi(2) + ses[j - 1].powi(2)).sqrt();
        assert!(means[j] >= means[j - 1] - slack, "window {j}: {means:?} +- {ses:?}");
    }
}

#[test]
fn square_wave_layers_do_not_grow_upward() {
    let dgp = DgpConfig {
        layers: 3,
        candidates: 25,
        layer_pretrain: 100,
        ..DgpConfig::default()
    };
    for seed in 0..3 {
        let data = square_wave(200, 2.0, 0.05, seed).unwrap();
        let train = TrainConfig {
            n_pre: 300,
            n_ppp: 400,
            n_post: 200,
            alpha: 0.2,
            seed,
            ..TrainConfig::default()
        };
        let out = dgp_train(DgpModel::new(&data.x, &dgp, seed).unwrap(), &data.x, &data.y, &dgp, &train).unwrap();
        let counts = out.model.candidate_counts();
        println!("seed {seed}: kept per layer {counts:?}");
        let objective: Vec<f64> = out.history.records.iter().map(|r| r.elbo).collect();
        assert!(objective.iter().all(|v| v.is_finite()));
        let early = window_means(&objective[..200], 100);
        let late = window_means(&objective[objective.len() - 200..], 100);
        assert!(late[1] > early[0], "seed {seed}: {early:?} -> {late:?}");

        if counts.windows(2).all(|c| c[1] <= c[0]) {
            continue;
        }
        let unpruned = TrainConfig {
            n_ppp: 0,
            n_post: 0,
            n_pre: train.n_pre + train.n_ppp + train.n_post,
            ..train.clone()
        };
        let full = dgp_train(DgpModel::new(&data.x, &dgp, seed).unwrap(), &data.x, &data.y, &dgp, &unpruned).unwrap();
        let pruned_elbo = out.history.last().unwrap().elbo;
        let full_elbo = full.history.last().unwrap().elbo;
        assert!(pruned_elbo > full_elbo - 1.0, "seed {seed}: counts {counts:?}, {pruned_elbo} vs {full_elbo}");
    }
}
