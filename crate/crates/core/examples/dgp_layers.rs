//! Per-layer inducing-point selection in a two-layer deep GP with the input
//! fed to both layers.
//!
//! cargo run --release --example dgp_layers

use gpselect::data::kin8nm_like;
use gpselect::dgp::{dgp_predict, dgp_train, DgpConfig, DgpModel};
use gpselect::trainer::TrainConfig;

fn main() -> gpselect::Result<()> {
    let data = kin8nm_like(300, 0.05, 0)?;
    let dgp = DgpConfig {
        layers: 2,
        candidates: 25,
        layer_pretrain: 100,
        ..DgpConfig::default()
    };
    let train = TrainConfig {
        n_pre: 200,
        n_ppp: 300,
        n_post: 200,
        alpha: 0.05,
        ..TrainConfig::default()
    };
    let model = DgpModel::new(&data.x, &dgp, 0)?;
    let out = dgp_train(model, &data.x, &data.y, &dgp, &train)?;
    for (l, (p, s)) in out.posteriors.layers.iter().zip(&out.subsets).enumerate() {
        println!("layer {}: E = {:.2}, kept {}", l + 1, p.cardinality_stats().0, s.len());
    }
    let (mean, _) = dgp_predict(&out.model, &out.model.full_subsets(), &data.x, 64, 0)?;
    let mse = mean.iter().zip(data.y.iter()).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / mean.len() as f64;
    println!("training MSE (standardized): {mse:.4}");
    Ok(())
}
