//! Expected inducing-set size across observation-noise levels, with a
//! fixed-size baseline at the selected size.
//!
//! cargo run --release --example noise_sweep -- [out_dir]

use gpselect::data::{run_experiment, Condition, Config, RunKind};
use gpselect::trainer::ExtractionMode;

fn main() -> gpselect::Result<()> {
    let mut config = Config::default();
    config.synth.n = 200;
    config.synth.lengthscale = 5.0;
    config.model.candidates = 40;
    config.train.n_pre = 500;
    config.train.extraction = ExtractionMode::Sample;
    config.experiment.condition = Condition::Noise;
    config.experiment.intensities = vec![0.05, 0.3, 1.0];
    config.experiment.seeds = 2;
    config.experiment.gap_parity = true;
    config.experiment.baseline_epochs = 500;

    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let results = run_experiment(&config, out.as_deref())?;
    println!("{:>6} {:>5} {:>9} {:>7} {:>9} {:>10}", "sigma", "seed", "kind", "M", "E", "gap");
    for r in &results {
        println!(
            "{:>6} {:>5} {:>9} {:>7} {:>9} {:>10.3}",
            r.intensity,
            r.seed,
            r.kind.to_string(),
            r.m.map_or("-".into(), |m| m.to_string()),
            r.expected_m.map_or("-".into(), |e| format!("{e:.2}")),
            r.posterior_gap.unwrap_or(f64::NAN)
        );
    }
    let adaptive = results.iter().filter(|r| r.kind == RunKind::Adaptive).count();
    println!("{adaptive} adaptive runs");
    if let Some(dir) = out {
        println!("records in {}", dir.display());
    }
    Ok(())
}
