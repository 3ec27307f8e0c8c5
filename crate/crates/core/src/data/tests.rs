use super::*;
use crate::adgrad::cholesky_with_jitter;
use crate::gp::BoundMode;
use crate::kernel::KernelParams;
use crate::trainer::{Phase, TrainConfig};
use std::fs;

fn sample_var(v: &[f64]) -> f64 {
    mean_sd(v.iter().copied()).1.powi(2)
}

#[test]
fn noiseless_outputs_equal_the_latent_draw() {
    let spec = SynthSpec::new(Condition::Noise, 0.0, 40, 3);
    let data = synth_generate(&spec).unwrap();
    // regenerate f with the same stream: inputs, then the standard normals
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<f64> = (0..40).map(|_| rand::Rng::random_range(&mut rng, 0.0..100.0)).collect();
    let x = Mat::from_column_slice(40, 1, &xs);
    let gram = KernelParams::with_values(&[1.0], 1.0).gram(&x, &x).unwrap();
    let (l, _) = cholesky_with_jitter(&gram).unwrap();
    let eps = Mat::from_fn(40, 1, |_, _| StandardNormal.sample(&mut rng));
    let f = l * eps;
    let y = data.raw_y();
    for i in 0..40 {
        assert!((y[i] - f[(i, 0)]).abs() < 1e-10);
    }
    assert!((data.raw_x() - x).amax() < 1e-10);
}

#[test]
fn noise_condition_adds_the_requested_noise() {
    let clean = synth_generate(&SynthSpec::new(Condition::Noise, 0.0, 30, 5)).unwrap();
    let noisy = synth_generate(&SynthSpec::new(Condition::Noise, 0.5, 30, 5)).unwrap();
    let resid: Vec<f64> = clean.raw_y().iter().zip(noisy.raw_y()).map(|(a, b)| b - a).collect();
    assert!(resid.iter().any(|r| r.abs() > 1e-3));
    assert_eq!(clean.raw_x(), noisy.raw_x());
}

// Pearson chi-square upper quantile via the Wilson-Hilferty approximation.
fn chi2_upper_quantile(dof: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * dof);
    dof * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn diffuse_clusters_look_uniform() {
    let spec = SynthSpec::new(Condition::Clustering, 1e-6, 5000, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xs = synth::sample_inputs(&spec, &mut rng);
    let bins = 20;
    let mut counts = vec![0.0; bins];
    for x in &xs {
        counts[((x / 100.0 * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let expected = xs.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // p = 0.01 upper tail, z = 2.326
    assert!(stat < chi2_upper_quantile((bins - 1) as f64, 2.326), "chi2 {stat}");
    assert!(xs.iter().all(|x| (0.0..=100.0).contains(x)));
}

#[test]
fn tight_clusters_sit_on_the_means() {
    let spec = SynthSpec::new(Condition::Clustering, 10.0, 500, 2);
    let data = synth_generate(&spec).unwrap();
    for x in data.raw_x().iter() {
        let nearest = [10.0, 30.0, 50.0, 70.0, 90.0]
            .iter()
            .map(|c| (x - c).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest < 2.0, "{x}");
    }
}

#[test]
fn unit_gp_output_variance() {
    let sigma = 0.1;
    let mut total = 0.0;
    for seed in 0..10 {
        let data = synth_generate(&SynthSpec::new(Condition::Noise, sigma, 500, seed)).unwrap();
        total += sample_var(&data.raw_y());
    }
    let mean = total / 10.0;
    assert!((mean - (1.0 + sigma * sigma)).abs() < 0.2, "{mean}");
}

#[test]
fn synthetic_generation_is_seeded_and_bounded() {
    let spec = SynthSpec::new(Condition::Smoothness, 2.0, 50, 8);
    assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    let mut big = spec.clone();
    big.n = MAX_DENSE_SAMPLES + 1;
    assert!(matches!(synth_generate(&big), Err(Error::TooLarge { .. })));
    let bad = SynthSpec::new(Condition::Smoothness, 0.0, 10, 0);
    assert!(synth_generate(&bad).is_err());
    let neg = SynthSpec::new(Condition::Noise, -0.1, 10, 0);
    assert!(synth_generate(&neg).is_err());
}

#[test]
fn corruption_identity_and_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y: Vec<f64> = (0..10_000).map(|_| 3.0 + 2.0 * normal(&mut rng)).collect();
    assert_eq!(corrupt_outputs(&y, 0.0, 1), y);
    let v = 0.3;
    let c = corrupt_outputs(&y, v, 1);
    let ratio = sample_var(&c) / sample_var(&y);
    assert!((ratio / (1.0 + v * v) - 1.0).abs() < 0.05, "{ratio}");
    let (my, sd) = mean_sd(y.iter().copied());
    let (mc, _) = mean_sd(c.iter().copied());
    assert!((mc - my).abs() < 3.0 * sd * v / (y.len() as f64).sqrt());
    assert_eq!(corrupt_outputs(&y, v, 1), c);
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn two_row_csv_is_standardized() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.csv", "a,b,target\n1,10,5\n3,10,9\n");
    let data = load_csv(&p, &Target::Last).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data.dim(), 2);
    for j in 0..2 {
        assert!(data.x.column(j).sum().abs() < 1e-12);
    }
    assert!(data.y.sum().abs() < 1e-12);
    assert_eq!(data.stats.constant_columns, vec![1]);
    assert_eq!(data.stats.input_names, vec!["a", "b"]);
    let named = load_csv(&p, &Target::Named("a".into())).unwrap();
    assert_eq!(named.stats.target_name, "a");
    assert_eq!(named.raw_y(), vec![1.0, 3.0]);
}

#[test]
fn missing_cell_names_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "m.csv", "a,b,y\n1,2,3\n4,,6\n");
    match load_csv(&p, &Target::Last) {
        Err(Error::Csv { row, column, .. }) => {
            assert_eq!(row, 2);
            assert_eq!(column, "b");
        }
        other => panic!("{other:?}"),
    }
    let short = write(dir.path(), "s.csv", "a,b,y\n1,2\n");
    assert!(matches!(load_csv(&short, &Target::Last), Err(Error::Csv { row: 1, .. })));
    let text = write(dir.path(), "t.csv", "a,y\n1,x\n");
    assert!(matches!(load_csv(&text, &Target::Last), Err(Error::Csv { .. })));
    let empty = write(dir.path(), "e.csv", "");
    assert!(load_csv(&empty, &Target::Last).is_err());
    let header_only = write(dir.path(), "h.csv", "a,y\n");
    assert!(matches!(load_csv(&header_only, &Target::Last), Err(Error::EmptyData)));
}

#[test]
fn standardization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Mat::from_fn(30, 3, |_, j| 100.0 * j as f64 + normal(&mut rng));
    let y: Vec<f64> = (0..30).map(|i| 1e3 + i as f64 * 0.37).collect();
    let data = Dataset::from_raw(x.clone(), y.clone(), "t").unwrap();
    for (a, b) in data.raw_y().iter().zip(&y) {
        assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
    }
    assert!((data.raw_x() - &x).amax() < 1e-10);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    write_dataset_csv(&p, &data).unwrap();
    let back = load_csv(&p, &Target::Last).unwrap();
    assert!((back.x.clone() - data.x.clone()).amax() < 1e-12);
    let inputs = load_inputs_csv(&p, &data.stats).unwrap();
    assert!((inputs - x).amax() < 1e-10);
}

#[test]
fn non_finite_data_is_rejected() {
    let x = Mat::from_column_slice(2, 1, &[1.0, f64::NAN]);
    assert!(Dataset::from_raw(x, vec![0.0, 1.0], "t").is_err());
    assert!(matches!(Dataset::from_raw(Mat::zeros(0, 1), vec![], "t"), Err(Error::EmptyData)));
}

fn gap_toy(seed: u64, n: usize) -> (SvgpModel, Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::from_fn(n, 1, |i, _| 0.9 * i as f64 + rand::Rng::random_range(&mut rng, -0.2..0.2));
    let y = Mat::from_fn(n, 1, |i, _| (0.8 * x[(i, 0)]).sin() + 0.1 * normal(&mut rng));
    let mut model = SvgpModel::new(x.clone(), BoundMode::Collapsed).unwrap();
    model.kernel = KernelParams::with_values(&[1.5], 1.0);
    model.log_noise = (0.05f64).ln();
    (model, x, y)
}

#[test]
fn gap_vanishes_with_every_input_included() {
    let (model, x, y) = gap_toy(0, 12);
    let gap = posterior_gap(&model, &SubsetIndex::full(12), &x, &y).unwrap();
    assert!(gap.abs() < 1e-8, "{gap}");
}

#[test]
fn nested_subsets_shrink_the_gap() {
    let (model, x, y) = gap_toy(1, 14);
    let order = [3, 10, 0, 7, 12, 5, 1, 9, 13, 2, 6, 11, 4, 8];
    let mut prev = f64::INFINITY;
    for m in 0..=order.len() {
        let subset = SubsetIndex::new(order[..m].to_vec(), 14).unwrap();
        let gap = posterior_gap(&model, &subset, &x, &y).unwrap();
        assert!(gap >= -1e-9);
        assert!(gap <= prev + 1e-9, "M={m}: {gap} > {prev}");
        prev = gap;
    }
}

#[test]
fn single_point_empty_subset_gap() {
    let mut model = SvgpModel::new(Mat::from_element(1, 1, 0.0), BoundMode::Collapsed).unwrap();
    model.kernel = KernelParams::new(1);
    model.log_noise = 0.0;
    let x = Mat::from_element(1, 1, 0.0);
    let y = Mat::from_element(1, 1, 0.0);
    let gap = posterior_gap(&model, &SubsetIndex::empty(), &x, &y).unwrap();
    // log N(0 | 0, 2) - (log N(0 | 0, 1) - 1/2)
    let expected = 0.5 - 0.5 * 2f64.ln();
    assert!((gap - expected).abs() < 1e-10, "{gap} vs {expected}");
    assert!((gap - 0.153426).abs() < 1e-6);
}

#[test]
fn gap_refuses_large_data() {
    let x = Mat::zeros(MAX_EXACT + 1, 1);
    let y = Mat::zeros(MAX_EXACT + 1, 1);
    let model = SvgpModel::new(Mat::zeros(1, 1), BoundMode::Collapsed).unwrap();
    assert!(matches!(
        posterior_gap(&model, &SubsetIndex::full(1), &x, &y),
        Err(Error::TooLarge { .. })
    ));
}

fn file_fixture() -> ModelFile {
    let (model, x, y) = gap_toy(2, 5);
    let raw: Vec<f64> = y.iter().copied().collect();
    let stats = Standardization::fit(&x, &raw, vec!["x0".into()], "y".into());
    ModelFile::new(
        stats,
        TrainConfig::default(),
        ModelPayload::Svgp {
            model,
            posterior: None,
            selected: Some(vec![0, 2]),
        },
    )
}

#[test]
fn model_file_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let file = file_fixture();
    file.save(&p).unwrap();
    assert_eq!(ModelFile::load(&p).unwrap(), file);
    let text = fs::read_to_string(&p).unwrap();
    let bumped = text.replacen(&format!("\"version\": {MODEL_FILE_VERSION}"), "\"version\": 99", 1);
    assert_ne!(bumped, text);
    assert!(matches!(
        ModelFile::from_json(&bumped),
        Err(Error::ModelVersion { found: 99, .. })
    ));
}

#[test]
fn dgp_model_file_round_trips() {
    use crate::dgp::{DgpConfig, DgpModel};
    let (_, x, _) = gap_toy(3, 10);
    let model = DgpModel::new(&x, &DgpConfig::default(), 0).unwrap();
    let base = file_fixture();
    let file = ModelFile::new(
        base.standardization,
        base.config,
        ModelPayload::Dgp {
            model,
            posteriors: vec![],
            subsets: vec![vec![0], vec![1, 2]],
        },
    );
    let json = serde_json::to_string(&file).unwrap();
    assert_eq!(ModelFile::from_json(&json).unwrap(), file);
}

#[test]
fn config_defaults_and_unknown_keys() {
    let c = parse_config("").unwrap();
    assert_eq!(c, Config::default());
    let c = parse_config("[train]\nalpha = 0.3\n[synth]\ncondition = \"clustering\"\n").unwrap();
    assert_eq!(c.train.alpha, 0.3);
    assert_eq!(c.train.n_pre, TrainConfig::default().n_pre);
    assert_eq!(c.synth.condition, Condition::Clustering);
    assert!(matches!(parse_config("[train]\nalhpa = 0.3\n"), Err(Error::Toml(_))));
    assert!(matches!(parse_config("[nope]\n"), Err(Error::Toml(_))));
}

#[test]
fn history_round_trips_with_expected_field_names() {
    let (model, x, y) = gap_toy(4, 10);
    let config = TrainConfig {
        n_pre: 3,
        n_ppp: 3,
        n_post: 2,
        ..TrainConfig::default()
    };
    let out = crate::trainer::run_training(model, &x, &y, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.jsonl");
    write_history(&p, &out.history).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&String> = first.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["elbo", "epoch", "expected_M", "phase", "ppp_kl", "wall_ms"]);
    let back = read_history(&p).unwrap();
    assert_eq!(back.records.len(), 8);
    assert_eq!(back.phase(Phase::Ppp).count(), 3);
    assert!(back.same_numbers(&out.history));
}

fn small_experiment() -> Config {
    let mut c = Config::default();
    c.synth.n = 60;
    c.model.candidates = 12;
    c.train.n_pre = 60;
    c.train.n_ppp = 150;
    c.train.n_post = 30;
    c.experiment.intensities = vec![0.1];
    c.experiment.seeds = 1;
    c.experiment.baseline_epochs = 150;
    c.experiment.subset_samples = 4;
    c.synth.lengthscale = 25.0;
    c
}

#[test]
fn baseline_sweep_gap_shrinks_with_size() {
    let mut c = small_experiment();
    c.experiment.adaptive = false;
    c.experiment.baselines = vec![2, 4, 8];
    let results = run_experiment(&c, None).unwrap();
    assert_eq!(results.len(), 3);
    let gaps: Vec<f64> = results.iter().map(|r| r.posterior_gap.unwrap()).collect();
    assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
    assert!(results.iter().all(|r| r.kind == RunKind::Baseline && r.expected_m.is_none()));
    assert_eq!(results.iter().map(|r| r.m.unwrap()).collect::<Vec<_>>(), vec![2, 4, 8]);
}

#[test]
fn stronger_prior_selects_fewer_points() {
    let mut c = small_experiment();
    c.experiment.alphas = vec![0.0, 1.0];
    let results = run_experiment(&c, None).unwrap();
    let e = |a: f64| results.iter().find(|r| r.alpha == Some(a)).unwrap().expected_m.unwrap();
    assert!(e(1.0) <= e(0.0), "{} > {}", e(1.0), e(0.0));
    assert!(results.iter().all(|r| r.sampled_sizes.len() == 4));
}

#[test]
fn experiment_output_is_reproducible_and_reloadable() {
    let mut c = small_experiment();
    c.train.n_ppp = 40;
    c.experiment.baselines = vec![3];
    c.experiment.gap_parity = true;
    c.experiment.seeds = 2;
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&c, Some(dir.path())).unwrap();
    let b = run_experiment(&c, None).unwrap();
    assert_eq!(a.len(), 6);
    let strip = |rs: &[ExperimentResult]| {
        rs.iter()
            .map(|r| ExperimentResult { wall_ms: 0.0, ..r.clone() })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    let loaded = read_results(&dir.path().join("results.jsonl")).unwrap();
    assert_eq!(loaded, a);
    let table = fs::read_to_string(dir.path().join("results_long.csv")).unwrap();
    assert!(table.starts_with("condition,intensity,seed,metric,value"));
    assert!(table.contains("parity[M="));
    let histories = fs::read_dir(dir.path().join("history")).unwrap().count();
    assert_eq!(histories, 6);
    // replicate seeds come from the base seed, run seeds from the run index
    assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn failed_runs_are_recorded() {
    let mut c = small_experiment();
    c.experiment.adaptive = false;
    c.experiment.baselines = vec![2];
    c.experiment.intensities = vec![-1.0, 0.1];
    let results = run_experiment(&c, None).unwrap();
    assert_eq!(results.len(), 2);
    assert!(results[0].error.is_some());
    assert!(results[1].error.is_none());
}

#[test]
fn corruption_sweep_reads_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&SynthSpec::new(Condition::Noise, 0.1, 40, 0)).unwrap();
    let p = dir.path().join("d.csv");
    write_dataset_csv(&p, &data).unwrap();
    let mut c = small_experiment();
    c.experiment.source = Source::Csv;
    c.experiment.condition = Condition::Corruption;
    c.experiment.csv = Some(p);
    c.experiment.adaptive = false;
    c.experiment.baselines = vec![4];
    c.experiment.intensities = vec![0.0, 0.5];
    let results = run_experiment(&c, None).unwrap();
    assert!(results.iter().all(|r| r.error.is_none()), "{results:?}");
    assert_eq!(results[0].condition, Condition::Corruption);
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
