use super::*;
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let b = rand_mat(rng, n, n);
    &b * b.transpose() + Mat::identity(n, n) * (n as f64) * 0.5
}

/// Gauss-Jordan inverse with partial pivoting.
fn gauss_jordan_inverse(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut aug = Mat::zeros(n, 2 * n);
    aug.columns_mut(0, n).copy_from(a);
    aug.columns_mut(n, n).copy_from(&Mat::identity(n, n));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[(i, col)].abs().total_cmp(&aug[(j, col)].abs()))
            .unwrap();
        aug.swap_rows(col, pivot);
        let p = aug[(col, col)];
        for j in 0..2 * n {
            aug[(col, j)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = aug[(i, col)];
                for j in 0..2 * n {
                    aug[(i, j)] -= f * aug[(col, j)];
                }
            }
        }
    }
    aug.columns(n, n).into_owned()
}

#[test]
fn dot_product_forward_and_backward() {
    let tape = Tape::new();
    let x = tape.param(Mat::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
    let f = x.t().matmul(x);
    assert_eq!(tape.scalar(f).unwrap(), 14.0);
    let g = tape.backward(f).unwrap().wrt(x);
    assert_eq!(g.as_slice(), &[2.0, 4.0, 6.0]);
}

#[test]
fn logdet_identity_is_zero() {
    let tape = Tape::new();
    let a = tape.constant(Mat::identity(3, 3));
    assert_eq!(a.logdet().scalar().unwrap(), 0.0);
}

#[test]
fn logdet_gradient_of_diagonal() {
    let tape = Tape::new();
    let a = tape.param(Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 4.0])));
    let f = a.logdet();
    let g = tape.backward(f).unwrap().wrt(a);
    assert_relative_eq!(g[(0, 0)], 0.5, epsilon = 1e-14);
    assert_relative_eq!(g[(1, 1)], 0.25, epsilon = 1e-14);
    assert_eq!(g[(0, 1)], 0.0);
    assert_eq!(g[(1, 0)], 0.0);
}

#[test]
fn trace_of_a_times_inverse_matches_gauss_jordan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_spd(&mut rng, 4);
    let inv = gauss_jordan_inverse(&a);
    assert_relative_eq!((&a * &inv).trace(), 4.0, epsilon = 1e-12);

    let tape = Tape::new();
    let av = tape.param(a.clone());
    let l = av.cholesky();
    let eye = tape.constant(Mat::identity(4, 4));
    let a_inv = l.solve_lower_t(l.solve_lower(eye));
    let t = av.matmul(a_inv).trace();
    assert_relative_eq!(t.scalar().unwrap(), 4.0, epsilon = 1e-12);
    let ad_inv = a_inv.value().unwrap();
    assert!((ad_inv - inv).abs().max() < 1e-12);
}

#[test]
fn cholesky_logdet_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_spd(&mut rng, 5);
    let err = check_gradients(|_, v| v[0].logdet(), &[a], 1e-5).unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn elementwise_exp_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_mat(&mut rng, 4, 1);
    let err = check_gradients(|_, v| v[0].exp().sum(), &[x], 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn constant_function_has_zero_error() {
    let x = Mat::from_element(3, 1, 0.3);
    let err = check_gradients(|t, _| t.scalar_constant(2.0), &[x], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn logdet_via_cholesky_matches_diagonal_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 2, 8, 17, 33, 64] {
        let a = rand_spd(&mut rng, n);
        let tape = Tape::new();
        let l = tape.constant(a.clone()).cholesky();
        let ld = l.logdet_chol().scalar().unwrap();
        let lv = l.value().unwrap();
        let direct: f64 = lv.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        assert!((ld - direct).abs() < 1e-10, "n={n}");
        let eig: f64 = a.clone().symmetric_eigenvalues().iter().map(|e| e.ln()).sum();
        assert!((ld - eig).abs() < 1e-8 * (1.0 + eig.abs()), "n={n}");
    }
}

#[test]
fn shape_mismatch_poisons_the_tape() {
    let tape = Tape::new();
    let a = tape.param(Mat::zeros(2, 3));
    let b = tape.param(Mat::zeros(2, 3));
    let bad = a.matmul(b);
    let later = bad.sum();
    assert!(matches!(
        tape.scalar(later),
        Err(AdError::ShapeMismatch { op: "matmul", .. })
    ));
    assert!(tape.backward(later).is_err());
}

#[test]
fn non_pd_cholesky_reports_min_eigenvalue() {
    let tape = Tape::new();
    let a = tape.constant(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
    let l = a.cholesky();
    match tape.value(l) {
        Err(AdError::NotPositiveDefinite { min_eigenvalue, .. }) => {
            assert_relative_eq!(min_eigenvalue, -1.0, epsilon = 1e-12)
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn jitter_rescues_semidefinite_matrix() {
    let tape = Tape::new();
    let ones = tape.constant(Mat::from_element(3, 3, 1.0));
    let l = ones.cholesky().value().unwrap();
    let rebuilt = &l * l.transpose();
    assert!((rebuilt - Mat::from_element(3, 3, 1.0)).abs().max() < 1e-3);
}

#[test]
fn backward_rejects_matrix_output() {
    let tape = Tape::new();
    let a = tape.param(Mat::zeros(2, 2));
    assert!(matches!(
        tape.backward(a.exp()),
        Err(AdError::NonScalarOutput((2, 2)))
    ));
}

#[test]
fn backward_is_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_spd(&mut rng, 6);
    let run = || {
        let tape = Tape::new();
        let v = tape.param(a.clone());
        let out = v.logdet() + v.matmul(v).trace();
        tape.backward(out).unwrap().wrt(v)
    };
    let g1 = run();
    let g2 = run();
    assert!(g1.iter().zip(g2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn apply_case<'t>(name: &str, v: &[Var<'t>]) -> Var<'t> {
    match name {
        "add" => v[0] + v[1],
        "sub" => v[0] - v[1],
        "scale" => v[0] * -1.7,
        "mul_scalar" => v[0].mul_scalar(v[1]),
        "hadamard" => v[0].mul(v[1]),
        "matmul" => v[0].matmul(v[1]),
        "transpose" => v[0].t(),
        "exp" => v[0].exp(),
        "log" => v[0].ln(),
        "sqrt" => v[0].sqrt(),
        "logistic" => v[0].logistic(),
        "log_sigmoid" => v[0].log_sigmoid(),
        "square" => v[0].square(),
        "sum" => v[0].sum(),
        "trace" => v[0].trace(),
        "diag" => v[0].diag(),
        "diag_embed" => v[0].diag_embed(),
        "cholesky" => v[0].cholesky(),
        "solve_lower" => v[0].solve_lower(v[1]),
        "solve_lower_t" => v[0].solve_lower_t(v[1]),
        "logdet" => v[0].logdet(),
        "quad_form" => v[0].quad_form(v[1]),
        "sqdist" => v[0].sqdist(v[1]),
        "select_rows" => v[0].select_rows(&[4, 0, 0, 2]),
        "column" => v[0].column(1),
        "hcat" => v[0].hcat(v[1]),
        other => unreachable!("{other}"),
    }
}

/// Each primitive is reduced to a scalar through a random linear functional.
#[test]
fn every_primitive_matches_finite_differences() {
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Mat>);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases: Vec<Case> = vec![
        ("add", |r| vec![rand_mat(r, 3, 2), rand_mat(r, 3, 2)]),
        ("sub", |r| vec![rand_mat(r, 3, 2), rand_mat(r, 3, 2)]),
        ("scale", |r| vec![rand_mat(r, 3, 2)]),
        ("mul_scalar", |r| vec![rand_mat(r, 3, 2), rand_mat(r, 1, 1)]),
        ("hadamard", |r| vec![rand_mat(r, 3, 2), rand_mat(r, 3, 2)]),
        ("matmul", |r| vec![rand_mat(r, 3, 4), rand_mat(r, 4, 2)]),
        ("transpose", |r| vec![rand_mat(r, 3, 2)]),
        ("exp", |r| vec![rand_mat(r, 3, 2)]),
        ("log", |r| vec![rand_mat(r, 3, 2).map(|x| x.abs() + 0.5)]),
        ("sqrt", |r| vec![rand_mat(r, 3, 2).map(|x| x.abs() + 0.5)]),
        ("logistic", |r| vec![rand_mat(r, 3, 2) * 3.0]),
        ("log_sigmoid", |r| vec![rand_mat(r, 3, 2) * 3.0]),
        ("square", |r| vec![rand_mat(r, 3, 2)]),
        ("sum", |r| vec![rand_mat(r, 3, 2)]),
        ("trace", |r| vec![rand_mat(r, 3, 3)]),
        ("diag", |r| vec![rand_mat(r, 4, 4)]),
        ("diag_embed", |r| vec![rand_mat(r, 4, 1)]),
        ("cholesky", |r| vec![rand_spd(r, 4)]),
        ("solve_lower", |r| {
            let l = rand_spd(r, 4).cholesky().unwrap().l();
            vec![l, rand_mat(r, 4, 3)]
        }),
        ("solve_lower_t", |r| {
            let l = rand_spd(r, 4).cholesky().unwrap().l();
            vec![l, rand_mat(r, 4, 3)]
        }),
        ("logdet", |r| vec![rand_spd(r, 4)]),
        ("quad_form", |r| vec![rand_mat(r, 4, 1), rand_mat(r, 4, 4)]),
        ("sqdist", |r| vec![rand_mat(r, 3, 2), rand_mat(r, 4, 2)]),
        ("select_rows", |r| vec![rand_mat(r, 5, 2)]),
        ("column", |r| vec![rand_mat(r, 3, 3)]),
        ("hcat", |r| vec![rand_mat(r, 3, 2), rand_mat(r, 3, 1)]),
    ];

    for (name, make) in cases {
        for _ in 0..20 {
            let point = make(&mut rng);
            let weights_seed: u64 = rng.random();
            let probe = {
                let tape = Tape::new();
                let leaves: Vec<_> = point.iter().map(|m| tape.param(m.clone())).collect();
                apply_case(name, &leaves).value().unwrap()
            };
            let mut wrng = ChaCha8Rng::seed_from_u64(weights_seed);
            let weights = Mat::from_fn(probe.nrows(), probe.ncols(), |_, _| {
                wrng.random_range(0.5..1.5)
            });
            let err = check_gradients(
                |t, v| apply_case(name, v).mul(t.constant(weights.clone())).sum(),
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }
}
