//! CSV in, model file out, predictions back in original units.
//!
//! cargo run --release --example csv_pipeline

use gpselect::data::{
    initial_candidates, load_csv, load_inputs_csv, synth_generate, write_dataset_csv, Condition, ModelFile,
    ModelPayload, SynthSpec, Target,
};
use gpselect::gp::{predict, SubsetIndex, SvgpModel};
use gpselect::trainer::{run_training, TrainConfig};

fn main() -> gpselect::Result<()> {
    let dir = tempfile::tempdir()?;
    let csv = dir.path().join("data.csv");
    let spec = SynthSpec {
        lengthscale: 15.0,
        ..SynthSpec::new(Condition::Noise, 0.1, 150, 4)
    };
    write_dataset_csv(&csv, &synth_generate(&spec)?)?;

    let data = load_csv(&csv, &Target::Last)?;
    let config = TrainConfig {
        alpha: 0.1,
        ..TrainConfig::default()
    };
    let z = initial_candidates(&data.x, 30, 0);
    let out = run_training(SvgpModel::new(z, config.mode)?, &data.x, &data.y, &config)?;
    let mut model = out.model;
    let (m, s) = model.q_u(&SubsetIndex::full(model.num_candidates()), &data.x, &data.y)?;
    model.set_q(&m, &s)?;
    println!("kept {} of 30 candidates", model.num_candidates());

    let path = dir.path().join("model.json");
    let payload = ModelPayload::Svgp {
        model,
        posterior: Some(out.posterior),
        selected: Some(out.subset.as_slice().to_vec()),
    };
    ModelFile::new(data.stats.clone(), config, payload).save(&path)?;

    let file = ModelFile::load(&path)?;
    let ModelPayload::Svgp { model, .. } = &file.payload else {
        unreachable!("saved a single-layer model")
    };
    let raw = load_inputs_csv(&csv, &file.standardization)?;
    let x = file.standardization.standardize_x(&raw);
    let (mean, var) = predict(model, &SubsetIndex::full(model.num_candidates()), &model.q_mu, &model.s_full(), &x)?;
    let mean = file.standardization.unstandardize_y(&mean);
    let var = file.standardization.unstandardize_var(&var);
    let y = data.raw_y();
    for i in 0..5 {
        println!("x = {:7.3}  y = {:7.3}  mean = {:7.3}  sd = {:.3}", raw[(i, 0)], y[i], mean[i], var[i].sqrt());
    }
    Ok(())
}
