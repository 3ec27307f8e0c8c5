use super::*;
use crate::adgrad::check_gradients;
use crate::kernel::KernelVars;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn toy(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Mat, Mat) {
    let x = Mat::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let y = Mat::from_fn(n, 1, |i, _| (x[(i, 0)] * 1.3).sin() + 0.1 * rng.random::<f64>());
    (x, y)
}

fn random_model(rng: &mut ChaCha8Rng, z: Mat, mode: BoundMode) -> SvgpModel {
    let mut m = SvgpModel::new(z, mode).unwrap();
    let d = m.input_dim();
    m.kernel = KernelParams::with_values(
        &(0..d).map(|_| rng.random_range(0.6..1.8)).collect::<Vec<_>>(),
        rng.random_range(0.5..2.0),
    );
    m.log_noise = rng.random_range(0.05f64..0.5).ln();
    m
}

fn random_q(rng: &mut ChaCha8Rng, model: &mut SvgpModel) {
    let k = model.num_candidates();
    model.q_mu = Mat::from_fn(k, 1, |_, _| rng.random_range(-1.0..1.0));
    let mut raw = Mat::from_fn(k, k, |_, _| rng.random_range(-0.3..0.3)).lower_triangle();
    for i in 0..k {
        raw[(i, i)] = rng.random_range(-1.5..0.0);
    }
    model.q_sqrt = raw;
}

fn dense_lml(kernel: &KernelParams, noise: f64, x: &Mat, y: &Mat) -> f64 {
    let n = x.nrows();
    let cov = kernel.gram(x, x).unwrap() + Mat::identity(n, n) * noise;
    let inv = cov.clone().try_inverse().unwrap();
    let det = cov.determinant();
    let quad = (y.transpose() * inv * y)[(0, 0)];
    -0.5 * quad - 0.5 * det.ln() - 0.5 * n as f64 * LN_2PI
}

#[test]
fn exact_lml_one_point() {
    let k = KernelParams::new(1);
    let x = Mat::zeros(1, 1);
    let y = Mat::zeros(1, 1);
    let v = exact_lml(&k, 1.0, &x, &y).unwrap();
    assert!((v - (-0.5 * (4.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    assert!((v + 1.26551).abs() < 1e-5);
}

#[test]
fn exact_lml_peaks_at_zero_outputs() {
    let k = KernelParams::new(1);
    let x = Mat::from_column_slice(2, 1, &[0.0, 0.7]);
    let at_zero = exact_lml(&k, 0.3, &x, &Mat::zeros(2, 1)).unwrap();
    let far = exact_lml(&k, 0.3, &x, &Mat::from_element(2, 1, 10.0)).unwrap();
    assert!(at_zero >= far);
}

#[test]
fn exact_lml_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = toy(&mut rng, 8, 2);
    let k = KernelParams::with_values(&[0.9, 1.4], 1.3);
    let v = exact_lml(&k, 0.2, &x, &y).unwrap();
    assert!((v - dense_lml(&k, 0.2, &x, &y)).abs() < 1e-9);
}

#[test]
fn gaussian_kl_basic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let s = &b * b.transpose() + Mat::identity(3, 3);
    let m = Mat::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
    assert!(gaussian_kl(&m, &s, &m, &s).unwrap().abs() < 1e-12);

    let one = Mat::from_element(1, 1, 1.0);
    let kl = gaussian_kl(&one, &one, &Mat::zeros(1, 1), &one).unwrap();
    assert!((kl - 0.5).abs() < 1e-14);
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let make_spd = |rng: &mut ChaCha8Rng| {
        let b = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + Mat::identity(3, 3) * 0.5
    };
    let s0 = make_spd(&mut rng);
    let s1 = make_spd(&mut rng);
    let m0 = Mat::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
    let m1 = Mat::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
    let kl = gaussian_kl(&m0, &s0, &m1, &s1).unwrap();

    let l0 = s0.clone().cholesky().unwrap().l();
    let inv0 = s0.clone().try_inverse().unwrap();
    let inv1 = s1.clone().try_inverse().unwrap();
    let logdet0 = s0.determinant().ln();
    let logdet1 = s1.determinant().ln();
    let log_density = |x: &Mat, m: &Mat, inv: &Mat, logdet: f64| {
        let d = x - m;
        -0.5 * (d.transpose() * inv * &d)[(0, 0)] - 0.5 * logdet - 1.5 * LN_2PI
    };
    let n = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let eps = Mat::from_fn(3, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &m0 + &l0 * eps;
        let v = log_density(&x, &m0, &inv0, logdet0) - log_density(&x, &m1, &inv1, logdet1);
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - kl).abs() < 3.0 * se, "mc {mean} +- {se}, closed {kl}");
}

#[test]
fn collapsed_equals_exact_when_inducing_equals_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(2..=20);
        // well-separated inputs keep K_MM clear of the jitter path
        let x = Mat::from_fn(n, 1, |i, _| 1.5 * i as f64 + rng.random_range(-0.2..0.2));
        let y = Mat::from_fn(n, 1, |i, _| (x[(i, 0)] * 0.7).sin());
        let model = random_model(&mut rng, x.clone(), BoundMode::Collapsed);
        let c = collapsed_elbo(&model, &SubsetIndex::full(n), &x, &y).unwrap();
        let e = exact_lml(&model.kernel, model.noise_variance(), &x, &y).unwrap();
        assert!((c - e).abs() < 1e-8, "{c} vs {e}");
    }
}

#[test]
fn empty_subset_bound_one_point() {
    let model = SvgpModel::new(Mat::zeros(1, 1), BoundMode::Collapsed).unwrap();
    let x = Mat::zeros(1, 1);
    let y = Mat::zeros(1, 1);
    let v = collapsed_elbo(&model, &SubsetIndex::empty(), &x, &y).unwrap();
    // log N(0 | 0, 1) - 1/2
    let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
    assert!((v - expected).abs() < 1e-12);
    assert!((v + 1.418939).abs() < 1e-6);
}

#[test]
fn collapsed_bound_grows_with_nested_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = toy(&mut rng, 12, 1);
    let z = x.rows(0, 6).into_owned();
    let model = random_model(&mut rng, z, BoundMode::Collapsed);
    let mut prev = collapsed_elbo(&model, &SubsetIndex::empty(), &x, &y).unwrap();
    for m in 1..=6 {
        let v = collapsed_elbo(&model, &SubsetIndex::full(m), &x, &y).unwrap();
        assert!(v >= prev - 1e-9, "M={m}: {v} < {prev}");
        prev = v;
    }
}

#[test]
fn q_u_interpolates_in_the_noiseless_limit() {
    let x = Mat::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
    let y = Mat::from_column_slice(4, 1, &[0.3, -0.2, 0.8, 0.1]);
    let mut model = SvgpModel::new(x.clone(), BoundMode::Collapsed).unwrap();
    model.log_noise = 1e-8f64.ln();
    let (m, _) = collapsed_q_u(&model, &SubsetIndex::full(4), &x, &y).unwrap();
    assert!((m - &y).abs().max() < 1e-4);
}

#[test]
fn q_u_is_zero_for_zero_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, _) = toy(&mut rng, 6, 1);
    let model = random_model(&mut rng, x.rows(0, 3).into_owned(), BoundMode::Collapsed);
    let (m, _) = collapsed_q_u(&model, &SubsetIndex::full(3), &x, &Mat::zeros(6, 1)).unwrap();
    assert!(m.iter().all(|&v| v == 0.0));
}

#[test]
fn q_u_is_a_local_optimum_of_the_uncollapsed_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, y) = toy(&mut rng, 6, 1);
    let mut model = random_model(&mut rng, x.rows(0, 3).into_owned(), BoundMode::Uncollapsed);
    let full = SubsetIndex::full(3);
    let (m, s) = collapsed_q_u(&model, &full, &x, &y).unwrap();
    model.set_q(&m, &s).unwrap();
    let best = uncollapsed_elbo(&model, &full, &x, &y, 1.0).unwrap();
    let mut probes = 0;
    while probes < 20 {
        let dm = Mat::from_fn(3, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ds = Mat::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ds = &ds + ds.transpose();
        let norm = (dm.norm_squared() + ds.norm_squared()).sqrt();
        let (dm, ds) = (dm * (1e-2 / norm), ds * (1e-2 / norm));
        let mut probe = model.clone();
        // directions leaving the positive-definite cone are outside the domain
        if probe.set_q(&(&m + dm), &(&s + ds)).is_err() {
            continue;
        }
        let v = uncollapsed_elbo(&probe, &full, &x, &y, 1.0).unwrap();
        assert!(v < best, "{v} >= {best}");
        probes += 1;
    }
}

#[test]
fn uncollapsed_at_optimal_q_equals_collapsed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = toy(&mut rng, 10, 2);
    let mut model = random_model(&mut rng, x.rows(2, 4).into_owned(), BoundMode::Uncollapsed);
    let full = SubsetIndex::full(4);
    let (m, s) = collapsed_q_u(&model, &full, &x, &y).unwrap();
    model.set_q(&m, &s).unwrap();
    let u = uncollapsed_elbo(&model, &full, &x, &y, 1.0).unwrap();
    let c = collapsed_elbo(&model, &full, &x, &y).unwrap();
    assert!((u - c).abs() < 1e-8, "{u} vs {c}");
}

#[test]
fn prior_q_has_zero_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, _) = toy(&mut rng, 5, 1);
    let model = random_model(&mut rng, x, BoundMode::Uncollapsed);
    let mut model = model;
    model.reset_q_to_prior().unwrap();
    let kzz = model.kernel.gram(&model.inducing, &model.inducing).unwrap();
    let (m, s) = (model.q_mu.clone(), model.s_full());
    let kl = gaussian_kl(&m, &s, &Mat::zeros(5, 1), &kzz).unwrap();
    assert!(kl.abs() < 1e-9, "{kl}");

    // With q equal to the prior the bound reduces to the prior expected log-likelihood.
    let (xt, yt) = toy(&mut rng, 7, 1);
    let u = uncollapsed_elbo(&model, &SubsetIndex::full(5), &xt, &yt, 1.0).unwrap();
    let e = uncollapsed_elbo(&model, &SubsetIndex::empty(), &xt, &yt, 1.0).unwrap();
    assert!((u - e).abs() < 1e-8, "{u} vs {e}");
}

#[test]
fn bound_ordering_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(3..=20);
        let (x, y) = toy(&mut rng, n, 1);
        let k = rng.random_range(2..=6);
        let z = Mat::from_fn(k, 1, |_, _| rng.random_range(-3.0..3.0));
        let mut model = random_model(&mut rng, z, BoundMode::Uncollapsed);
        random_q(&mut rng, &mut model);
        let mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
        let subset = SubsetIndex::from_mask(&mask);
        let u = uncollapsed_elbo(&model, &subset, &x, &y, 1.0).unwrap();
        let c = collapsed_elbo(&model, &subset, &x, &y).unwrap();
        let e = exact_lml(&model.kernel, model.noise_variance(), &x, &y).unwrap();
        assert!(u <= c + 1e-8, "{u} > {c}");
        assert!(c <= e + 1e-8, "{c} > {e}");
    }
}

#[test]
fn predict_reverts_to_prior_far_away() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (x, y) = toy(&mut rng, 10, 1);
    let mut model = random_model(&mut rng, x.rows(0, 4).into_owned(), BoundMode::Collapsed);
    model.kernel = KernelParams::with_values(&[1.0], 1.7);
    let full = SubsetIndex::full(4);
    let (m, s) = collapsed_q_u(&model, &full, &x, &y).unwrap();
    let far = Mat::from_element(1, 1, 100.0);
    let (mean, var) = predict(&model, &full, &m, &s, &far).unwrap();
    assert!(mean[0].abs() < 1e-6);
    assert!((var[0] - 1.7).abs() < 1e-6);
}

#[test]
fn predict_interpolates_inducing_outputs() {
    let z = Mat::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
    let model = SvgpModel::new(z.clone(), BoundMode::Uncollapsed).unwrap();
    let u0 = Mat::from_column_slice(3, 1, &[0.4, -0.7, 1.1]);
    let s = Mat::identity(3, 3) * 1e-12;
    let full = SubsetIndex::full(3);
    let (mean, var) = predict(&model, &full, &u0, &s, &z).unwrap();
    for j in 0..3 {
        assert!((mean[j] - u0[j]).abs() < 1e-8);
        assert!(var[j] < 1e-8);
    }
}

#[test]
fn predict_matches_exact_gp_when_inducing_equals_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, y) = toy(&mut rng, 20, 1);
    let model = random_model(&mut rng, x.clone(), BoundMode::Collapsed);
    let full = SubsetIndex::full(20);
    let (m, s) = collapsed_q_u(&model, &full, &x, &y).unwrap();
    let xt = Mat::from_fn(7, 1, |_, _| rng.random_range(-3.0..3.0));
    let (mean, var) = predict(&model, &full, &m, &s, &xt).unwrap();

    let cov = model.kernel.gram(&x, &x).unwrap() + Mat::identity(20, 20) * model.noise_variance();
    let inv = cov.try_inverse().unwrap();
    let kxs = model.kernel.gram(&xt, &x).unwrap();
    let exact_mean = &kxs * &inv * &y;
    let exact_var = Mat::identity(7, 7) * model.kernel.variance() - &kxs * &inv * kxs.transpose();
    for i in 0..7 {
        assert!((mean[i] - exact_mean[i]).abs() < 1e-6);
        assert!((var[i] - exact_var[(i, i)]).abs() < 1e-6);
    }
}

#[test]
fn predict_variance_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (x, y) = toy(&mut rng, 15, 1);
    let model = random_model(&mut rng, x.rows(0, 8).into_owned(), BoundMode::Collapsed);
    let full = SubsetIndex::full(8);
    let (m, s) = collapsed_q_u(&model, &full, &x, &y).unwrap();
    let xt = Mat::from_fn(50, 1, |i, _| -5.0 + 0.2 * i as f64);
    let (_, var) = predict(&model, &full, &m, &s, &xt).unwrap();
    assert!(var.iter().all(|&v| v >= 0.0));
}

#[test]
fn subset_index_validation() {
    assert_eq!(SubsetIndex::new(vec![3, 1], 4).unwrap().as_slice(), &[1, 3]);
    assert!(SubsetIndex::new(vec![4], 4).is_err());
    assert!(SubsetIndex::new(vec![1, 1], 4).is_err());
    let s = SubsetIndex::from_mask(&[true, false, true]);
    assert_eq!(s.as_slice(), &[0, 2]);
    assert_eq!(s.to_mask(3), vec![true, false, true]);
}

fn leaves_for(model: &SvgpModel) -> Vec<Mat> {
    model.blocks()
}

fn vars_from<'t>(v: &[crate::adgrad::Var<'t>]) -> SvgpVars<'t> {
    SvgpVars::from_parts(
        KernelVars {
            log_lengthscales: v[0],
            log_variance: v[1],
        },
        v[2],
        v[3],
        v[4],
        v[5],
    )
}

#[test]
fn bound_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..10 {
        let (x, y) = toy(&mut rng, 8, 2);
        let z = Mat::from_fn(4, 2, |_, _| rng.random_range(-3.0..3.0));
        let mut model = random_model(&mut rng, z, BoundMode::Uncollapsed);
        random_q(&mut rng, &mut model);
        let subset = SubsetIndex::new(vec![0, 2, 3], 4).unwrap();
        let point = leaves_for(&model);
        let (xc, yc) = (x.clone(), y.clone());
        let collapsed = check_gradients(
            |t, v| {
                let vars = vars_from(v);
                collapsed_elbo_expr(&vars, &subset, t.constant(xc.clone()), t.constant(yc.clone()))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(collapsed < 1e-4, "trial {trial}: collapsed {collapsed}");
        let uncollapsed = check_gradients(
            |t, v| {
                let vars = vars_from(v);
                uncollapsed_elbo_expr(&vars, &subset, t.constant(x.clone()), t.constant(y.clone()), 2.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(uncollapsed < 1e-4, "trial {trial}: uncollapsed {uncollapsed}");
        let exact = check_gradients(
            |t, v| {
                let kv = KernelVars {
                    log_lengthscales: v[0],
                    log_variance: v[1],
                };
                exact_lml_expr(&kv, v[3], t.constant(x.clone()), t.constant(y.clone()))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(exact < 1e-4, "trial {trial}: exact {exact}");
    }
}
