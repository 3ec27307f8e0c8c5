use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use gpselect::data::{
    initial_candidates, load_config, load_csv, load_inputs_csv, run_experiment, synth_generate, write_csv,
    write_dataset_csv, write_history, Condition, Config, Dataset, ModelFile, ModelPayload, Target,
};
use gpselect::dgp::{dgp_predict, dgp_train, DgpModel};
use gpselect::gp::{predict, SubsetIndex, SvgpModel};
use gpselect::trainer::{run_training, TrainConfig};
use gpselect::{Error, Result};

#[derive(Parser)]
#[command(name = "gpselect", version, about = "Sparse GPs with a point process over inducing points")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Svgp,
    Dgp,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic data set to CSV.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        condition: Option<ConditionArg>,
        #[arg(long)]
        intensity: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit on the full candidate set. Deep models run their whole schedule.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Output column by name; defaults to the last column.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "svgp")]
        model: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fit the point process on a fitted model, prune it and re-fit.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output column by name; defaults to the last column.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        /// Per-candidate inclusion probabilities as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predictive mean and variances in original units.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a configured sweep.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    Noise,
    Smoothness,
    Clustering,
}

fn config_or_default(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), load_config)
}

fn fitted_svgp(mut model: SvgpModel, data: &Dataset) -> Result<SvgpModel> {
    // store q(u) so predictions need no training data
    let (m, s) = model.q_u(&SubsetIndex::full(model.num_candidates()), &data.x, &data.y)?;
    model.set_q(&m, &s)?;
    Ok(model)
}

fn fit(data: &Dataset, config: &Config, kind: Kind, out: &Path, history: Option<&Path>) -> Result<()> {
    let (payload, hist) = match kind {
        Kind::Svgp => {
            let z = initial_candidates(&data.x, config.model.candidates, config.train.seed);
            let train = TrainConfig {
                n_ppp: 0,
                n_post: 0,
                ..config.train.clone()
            };
            let outcome = run_training(SvgpModel::new(z, train.mode)?, &data.x, &data.y, &train)?;
            let model = fitted_svgp(outcome.model, data)?;
            (
                ModelPayload::Svgp {
                    model,
                    posterior: None,
                    selected: None,
                },
                outcome.history,
            )
        }
        Kind::Dgp => {
            let model = DgpModel::new(&data.x, &config.dgp, config.train.seed)?;
            let outcome = dgp_train(model, &data.x, &data.y, &config.dgp, &config.train)?;
            info!("kept per layer: {:?}", outcome.model.candidate_counts());
            (
                ModelPayload::Dgp {
                    model: outcome.model,
                    posteriors: outcome.posteriors.layers,
                    subsets: outcome.subsets.iter().map(|s| s.as_slice().to_vec()).collect(),
                },
                outcome.history,
            )
        }
    };
    if let Some(h) = history {
        write_history(h, &hist)?;
    }
    ModelFile::new(data.stats.clone(), config.train.clone(), payload).save(out)
}

struct SelectArgs<'a> {
    model: &'a Path,
    data: &'a Path,
    target: Option<String>,
    config: Option<&'a Path>,
    alpha: Option<f64>,
    out: &'a Path,
    history: Option<&'a Path>,
    report: Option<&'a Path>,
}

fn select(args: SelectArgs<'_>) -> Result<()> {
    let file = ModelFile::load(args.model)?;
    let ModelPayload::Svgp { model, .. } = file.payload else {
        return Err(Error::Config("select works on single-layer models; deep models select during fit".into()));
    };
    let data = load_csv(args.data, &Target::from(args.target))?;
    // reuse the fit's scaling so the candidates stay where they were
    let x = file.standardization.standardize_x(&data.raw_x());
    let y = file.standardization.standardize_y(&data.raw_y());
    let y = gpselect::adgrad::Mat::from_column_slice(y.len(), 1, &y);
    let mut train = match args.config {
        Some(p) => load_config(p)?.train,
        None => file.config.clone(),
    };
    if let Some(a) = args.alpha {
        train.alpha = a;
    }
    train.n_pre = 0;
    let outcome = run_training(model, &x, &y, &train)?;
    let lambda = outcome.posterior.probs();
    let (e, v) = outcome.posterior.cardinality_stats();
    info!("E|Z| = {e:.2} (sd {:.2}), kept {}", v.sqrt(), outcome.subset.len());
    if let Some(r) = args.report {
        write_csv(
            r,
            &["candidate", "lambda", "selected"],
            lambda
                .iter()
                .enumerate()
                .map(|(k, l)| vec![k as f64, *l, f64::from(u8::from(outcome.subset.contains(k)))]),
        )?;
    }
    if let Some(h) = args.history {
        write_history(h, &outcome.history)?;
    }
    let mut refit = outcome.model;
    let (m, s) = refit.q_u(&SubsetIndex::full(refit.num_candidates()), &x, &y)?;
    refit.set_q(&m, &s)?;
    let payload = ModelPayload::Svgp {
        model: refit,
        posterior: Some(outcome.posterior),
        selected: Some(outcome.subset.as_slice().to_vec()),
    };
    ModelFile::new(file.standardization, train, payload).save(args.out)
}

fn predict_file(model: &Path, data: &Path, out: &Path, seed: u64, samples: usize) -> Result<()> {
    let file = ModelFile::load(model)?;
    let stats = &file.standardization;
    let raw = load_inputs_csv(data, stats)?;
    let x = stats.standardize_x(&raw);
    let (mean, var, noise) = match &file.payload {
        ModelPayload::Svgp { model, .. } => {
            let full = SubsetIndex::full(model.num_candidates());
            let (m, v) = predict(model, &full, &model.q_mu, &model.s_full(), &x)?;
            (m, v, model.noise_variance())
        }
        ModelPayload::Dgp { model, .. } => {
            let (m, v) = dgp_predict(model, &model.full_subsets(), &x, samples, seed)?;
            (m, v, model.noise_variance())
        }
    };
    let mean = stats.unstandardize_y(&mean);
    let var = stats.unstandardize_var(&var);
    let noisy = stats.unstandardize_var(&[noise])[0];
    let mut header: Vec<&str> = stats.input_names.iter().map(String::as_str).collect();
    header.extend(["mean", "variance", "variance_y"]);
    write_csv(
        out,
        &header,
        (0..raw.nrows()).map(|i| {
            let mut row: Vec<f64> = raw.row(i).iter().copied().collect();
            row.extend([mean[i], var[i], var[i] + noisy]);
            row
        }),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            condition,
            intensity,
            n,
            seed,
            out,
        } => {
            let mut spec = config_or_default(config.as_deref())?.synth;
            if let Some(c) = condition {
                spec.condition = match c {
                    ConditionArg::Noise => Condition::Noise,
                    ConditionArg::Smoothness => Condition::Smoothness,
                    ConditionArg::Clustering => Condition::Clustering,
                };
            }
            spec.intensity = intensity.unwrap_or(spec.intensity);
            spec.n = n.unwrap_or(spec.n);
            spec.seed = seed.unwrap_or(spec.seed);
            write_dataset_csv(&out, &synth_generate(&spec)?)
        }
        Command::Fit {
            data,
            target,
            config,
            model,
            out,
            history,
        } => {
            let config = config_or_default(config.as_deref())?;
            let data = load_csv(&data, &Target::from(target))?;
            fit(&data, &config, model, &out, history.as_deref())
        }
        Command::Select {
            model,
            data,
            target,
            config,
            alpha,
            out,
            history,
            report,
        } => select(SelectArgs {
            model: &model,
            data: &data,
            target,
            config: config.as_deref(),
            alpha,
            out: &out,
            history: history.as_deref(),
            report: report.as_deref(),
        }),
        Command::Predict { model, data, out, seed } => {
            predict_file(&model, &data, &out, seed, gpselect::dgp::DgpConfig::default().predict_samples)
        }
        Command::Experiment { config, out } => {
            let config = load_config(&config)?;
            let results = run_experiment(&config, Some(&out))?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            info!("{} runs, {failed} failed", results.len());
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
