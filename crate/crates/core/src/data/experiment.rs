use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adgrad::Mat;
use crate::error::{Error, Result};
use crate::gp::{SubsetIndex, SvgpModel};
use crate::trainer::{run_training, TrainConfig, TrainHistory};

use super::files::{write_history, write_results, Config};
use super::{corrupt_outputs, load_csv, posterior_gap, synth_generate, Condition, Dataset, SynthSpec, Target};

/// Where sweep data comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Synthetic,
    /// A CSV file whose outputs are corrupted at each intensity.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub source: Source,
    pub condition: Condition,
    pub intensities: Vec<f64>,
    /// Replicates per intensity; replicate `r` uses data seed `base_seed + r`.
    pub seeds: usize,
    pub base_seed: u64,
    /// Prior strengths for adaptive runs; empty means `train.alpha`.
    pub alphas: Vec<f64>,
    pub adaptive: bool,
    /// Fixed inducing-set sizes fitted without the point process.
    pub baselines: Vec<usize>,
    /// Also fit a baseline at `M = round(E)` after each adaptive run.
    pub gap_parity: bool,
    pub baseline_epochs: usize,
    /// Subsets drawn from each fitted point process for the size report.
    pub subset_samples: usize,
    pub csv: Option<PathBuf>,
    pub target: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            condition: Condition::Noise,
            intensities: vec![0.05, 0.2, 0.5, 1.0],
            seeds: 3,
            base_seed: 0,
            alphas: Vec::new(),
            adaptive: true,
            baselines: Vec::new(),
            gap_parity: false,
            baseline_epochs: 1000,
            subset_samples: 10,
            csv: None,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Adaptive,
    Baseline,
    /// Fixed-size fit at the size an adaptive run selected.
    Parity,
}

impl std::fmt::Display for RunKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunKind::Adaptive => "adaptive",
            RunKind::Baseline => "baseline",
            RunKind::Parity => "parity",
        })
    }
}

/// One record per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub run: usize,
    pub kind: RunKind,
    pub condition: Condition,
    pub intensity: f64,
    /// Data seed of the replicate.
    pub seed: u64,
    /// Seed of the training run.
    pub run_seed: u64,
    pub alpha: Option<f64>,
    /// Inducing points in the final model.
    pub m: Option<usize>,
    pub expected_m: Option<f64>,
    pub sampled_sizes: Vec<usize>,
    pub final_elbo: Option<f64>,
    pub posterior_gap: Option<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

impl ExperimentResult {
    /// `(metric, value)` pairs for the long-format table; metric names carry
    /// the run kind and, for fixed sizes, `M`.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let prefix = match (self.kind, self.m) {
            (RunKind::Adaptive, _) => format!("adaptive[alpha={}]", self.alpha.unwrap_or(f64::NAN)),
            (kind, Some(m)) => format!("{kind}[M={m}]"),
            (kind, None) => kind.to_string(),
        };
        let mut out = Vec::new();
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push((format!("{prefix}.{name}"), v));
            }
        };
        push("M", self.m.map(|m| m as f64));
        push("expected_M", self.expected_m);
        push("final_elbo", self.final_elbo);
        push("posterior_gap", self.posterior_gap);
        push("wall_ms", Some(self.wall_ms));
        for s in &self.sampled_sizes {
            out.push((format!("{prefix}.sampled_size"), *s as f64));
        }
        out
    }
}

/// `k` distinct training inputs chosen uniformly at random.
pub fn initial_candidates(x: &Mat, k: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k.min(x.nrows()).max(1);
    let mut idx = sample(&mut rng, x.nrows(), k).into_vec();
    idx.sort_unstable();
    x.select_rows(idx.iter())
}

#[derive(Debug, Clone)]
enum Job {
    Adaptive { alpha: f64 },
    Baseline { m: usize },
}

#[derive(Debug, Clone)]
struct Run {
    index: usize,
    intensity: f64,
    replicate: usize,
    job: Job,
}

fn build_runs(exp: &ExperimentConfig, default_alpha: f64) -> Vec<Run> {
    let alphas = if exp.alphas.is_empty() {
        vec![default_alpha]
    } else {
        exp.alphas.clone()
    };
    let mut runs = Vec::new();
    for &intensity in &exp.intensities {
        for replicate in 0..exp.seeds {
            let mut jobs = Vec::new();
            if exp.adaptive {
                jobs.extend(alphas.iter().map(|&alpha| Job::Adaptive { alpha }));
            }
            jobs.extend(exp.baselines.iter().map(|&m| Job::Baseline { m }));
            for job in jobs {
                runs.push(Run {
                    index: runs.len(),
                    intensity,
                    replicate,
                    job,
                });
            }
        }
    }
    runs
}

fn dataset_for(config: &Config, base: Option<&Dataset>, intensity: f64, seed: u64) -> Result<Dataset> {
    let exp = &config.experiment;
    match exp.source {
        Source::Synthetic => synth_generate(&SynthSpec {
            condition: exp.condition,
            intensity,
            seed,
            ..config.synth.clone()
        }),
        Source::Csv => {
            let base = base.expect("csv data loaded up front");
            let y = corrupt_outputs(&base.raw_y(), intensity, seed);
            Dataset::from_raw_named(
                base.raw_x(),
                y,
                base.stats.input_names.clone(),
                base.stats.target_name.clone(),
                format!("{} corrupted v={intensity} seed={seed}", base.provenance),
            )
        }
    }
}

struct Fit {
    model: SvgpModel,
    history: TrainHistory,
    expected_m: Option<f64>,
    sampled_sizes: Vec<usize>,
}

fn fit_fixed_size(data: &Dataset, m: usize, train: &TrainConfig, epochs: usize, seed: u64) -> Result<Fit> {
    let z = initial_candidates(&data.x, m, seed);
    let model = SvgpModel::new(z, train.mode)?;
    let config = TrainConfig {
        n_pre: epochs,
        n_ppp: 0,
        n_post: 0,
        seed,
        ..train.clone()
    };
    let out = run_training(model, &data.x, &data.y, &config)?;
    Ok(Fit {
        model: out.model,
        history: out.history,
        expected_m: None,
        sampled_sizes: Vec::new(),
    })
}

fn fit_adaptive(config: &Config, data: &Dataset, alpha: f64, seed: u64) -> Result<Fit> {
    let z = initial_candidates(&data.x, config.model.candidates, seed);
    let model = SvgpModel::new(z, config.train.mode)?;
    let train = TrainConfig {
        alpha,
        seed,
        ..config.train.clone()
    };
    let out = run_training(model, &data.x, &data.y, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled_sizes = (0..config.experiment.subset_samples)
        .map(|_| out.posterior.sample(&mut rng).len())
        .collect();
    Ok(Fit {
        model: out.model,
        history: out.history,
        expected_m: Some(out.posterior.cardinality_stats().0),
        sampled_sizes,
    })
}

fn summarize(fit: &Fit, data: &Dataset) -> Result<(f64, f64)> {
    let full = SubsetIndex::full(fit.model.num_candidates());
    let elbo = fit.model.bound(&full, &data.x, &data.y, 1.0)?;
    let gap = posterior_gap(&fit.model, &full, &data.x, &data.y)?;
    Ok((elbo, gap))
}

fn record(
    run: &Run,
    kind: RunKind,
    config: &Config,
    alpha: Option<f64>,
    outcome: Result<(Fit, (f64, f64))>,
    start: Instant,
) -> (ExperimentResult, Option<TrainHistory>) {
    let exp = &config.experiment;
    let mut r = ExperimentResult {
        run: run.index,
        kind,
        condition: exp.condition,
        intensity: run.intensity,
        seed: exp.base_seed + run.replicate as u64,
        run_seed: exp.base_seed + run.index as u64,
        alpha,
        m: None,
        expected_m: None,
        sampled_sizes: Vec::new(),
        final_elbo: None,
        posterior_gap: None,
        wall_ms: 0.0,
        error: None,
    };
    let history = match outcome {
        Ok((fit, (elbo, gap))) => {
            r.m = Some(fit.model.num_candidates());
            r.expected_m = fit.expected_m;
            r.sampled_sizes = fit.sampled_sizes;
            r.final_elbo = Some(elbo);
            r.posterior_gap = Some(gap);
            Some(fit.history)
        }
        Err(e) => {
            log::error!("run {} ({kind}) failed: {e}", run.index);
            r.error = Some(e.to_string());
            None
        }
    };
    r.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    (r, history)
}

fn execute(run: &Run, config: &Config, base: Option<&Dataset>) -> Vec<(ExperimentResult, Option<TrainHistory>)> {
    let exp = &config.experiment;
    let data_seed = exp.base_seed + run.replicate as u64;
    let run_seed = exp.base_seed + run.index as u64;
    let start = Instant::now();
    let data = match dataset_for(config, base, run.intensity, data_seed) {
        Ok(d) => d,
        Err(e) => {
            let kind = match run.job {
                Job::Adaptive { .. } => RunKind::Adaptive,
                Job::Baseline { .. } => RunKind::Baseline,
            };
            return vec![record(run, kind, config, None, Err(e), start)];
        }
    };
    match run.job {
        Job::Baseline { m } => {
            let fit = fit_fixed_size(&data, m, &config.train, exp.baseline_epochs, run_seed)
                .and_then(|fit| summarize(&fit, &data).map(|s| (fit, s)));
            vec![record(run, RunKind::Baseline, config, None, fit, start)]
        }
        Job::Adaptive { alpha } => {
            let fit = fit_adaptive(config, &data, alpha, run_seed)
                .and_then(|fit| summarize(&fit, &data).map(|s| (fit, s)));
            let selected = fit.as_ref().ok().and_then(|(f, _)| f.expected_m);
            let mut out = vec![record(run, RunKind::Adaptive, config, Some(alpha), fit, start)];
            if let (true, Some(e)) = (exp.gap_parity, selected) {
                let start = Instant::now();
                let m = (e.round() as usize).max(1);
                let fit = fit_fixed_size(&data, m, &config.train, exp.baseline_epochs, run_seed)
                    .and_then(|fit| summarize(&fit, &data).map(|s| (fit, s)));
                out.push(record(run, RunKind::Parity, config, Some(alpha), fit, start));
            }
            out
        }
    }
}

/// Runs every configured fit. Individual failures are recorded in the
/// results and do not stop the sweep. With `out_dir`, writes
/// `results.jsonl`, `results_long.csv` and `history/run_<i>_<kind>.jsonl`.
pub fn run_experiment(config: &Config, out_dir: Option<&Path>) -> Result<Vec<ExperimentResult>> {
    let exp = &config.experiment;
    if exp.intensities.is_empty() || exp.seeds == 0 {
        return Err(Error::Config("experiment needs intensities and at least one seed".into()));
    }
    let base = match exp.source {
        Source::Csv => {
            if exp.condition != Condition::Corruption {
                return Err(Error::Config("csv sweeps vary the corruption condition".into()));
            }
            let path = exp
                .csv
                .as_ref()
                .ok_or_else(|| Error::Config("csv source needs experiment.csv".into()))?;
            Some(load_csv(path, &Target::from(exp.target.clone()))?)
        }
        Source::Synthetic => None,
    };
    let runs = build_runs(exp, config.train.alpha);
    let outputs: Vec<Vec<(ExperimentResult, Option<TrainHistory>)>> =
        runs.par_iter().map(|run| execute(run, config, base.as_ref())).collect();
    let outputs: Vec<(ExperimentResult, Option<TrainHistory>)> = outputs.into_iter().flatten().collect();

    if let Some(dir) = out_dir {
        let hist_dir = dir.join("history");
        fs::create_dir_all(&hist_dir)?;
        for (r, h) in &outputs {
            if let Some(h) = h {
                write_history(&hist_dir.join(format!("run_{}_{}.jsonl", r.run, r.kind)), h)?;
            }
        }
        let results: Vec<ExperimentResult> = outputs.iter().map(|(r, _)| r.clone()).collect();
        write_results(dir, &results)?;
    }
    Ok(outputs.into_iter().map(|(r, _)| r).collect())
}
