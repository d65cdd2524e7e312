//! Log-determinant, determinant-lemma and ridge-identity checks against
//! dense oracles that share no code with the library.

mod common;

use common::{cofactor_det, dense_solve, lu_log_abs_det, rel_err, small_model, system4};
use fading::blocks::NormMode;
use fading::linalg;
use fading::loss::{self, LossWeights};
use fading::model::RegressorMatrix;
use fading::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum::<f64>();
        }
        a[i * n + i] += 0.5;
    }
    a
}

#[test]
fn cholesky_logdet_matches_cofactor_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=6 {
        let a = random_spd(&mut rng, n);
        let rows: Vec<Vec<f64>> = a.chunks(n).map(<[f64]>::to_vec).collect();
        let want = cofactor_det(&rows).ln();
        let got = linalg::logdet_spd(&a, n).unwrap();
        assert!(
            (got - want).abs() < 1e-10 * want.abs().max(1.0),
            "n={n}: {got} vs {want}"
        );
    }
}

#[test]
fn solve_matches_pivoted_elimination() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 9;
    let a = random_spd(&mut rng, n);
    let b: Vec<f64> = (0..n).map(|i| i as f64 - 4.0).collect();
    let x = linalg::solve_spd(&a, n, &b).unwrap();
    for (u, v) in x.iter().zip(dense_solve(&a, n, &b)) {
        assert!((u - v).abs() < 1e-9 * v.abs().max(1.0));
    }
}

#[test]
fn non_spd_matrix_is_a_factorization_error() {
    let a = [1.0, 2.0, 2.0, 1.0];
    assert!(matches!(
        linalg::cholesky(&a, 2),
        Err(fading::Error::Factorization { pivot: 1, .. })
    ));
}

fn instance(rng: &mut ChaCha8Rng) -> (Tensor, Vec<f64>, f64, Vec<f64>) {
    let n = rng.random_range(1..=64);
    let k = rng.random_range(1..=9);
    let f: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let kappa = rng.random_range(0.05..3.0);
    let lambda = rng.random_range(0.05..0.99);
    let eta2 = 10f64.powf(rng.random_range(-2.0..1.0));
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    (
        Tensor::matrix(n, k, f).unwrap(),
        loss::prior_diag(kappa, lambda, k - 1),
        eta2,
        y,
    )
}

#[test]
fn determinant_lemma_matches_dense_log_determinant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..50 {
        let (f, diag, eta2, _) = instance(&mut rng);
        let n = f.shape()[0];
        let got = loss::logdet_capacity_value(&f, &diag, eta2).unwrap();
        let sigma = loss::dense_sigma(&f, &diag, eta2).unwrap();
        let want = lu_log_abs_det(&sigma, n);
        assert!(rel_err(got, want) < 1e-8, "case {case}: {got} vs {want}");
    }
}

#[test]
fn ridge_identity_and_bound_slack() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..50 {
        let (f, diag, eta2, y) = instance(&mut rng);
        let (lhs, rhs) = loss::ridge_identity_check(&f, &diag, eta2, &y).unwrap();
        // independent right side: pivoted elimination on Σ
        let n = y.len();
        let sigma = loss::dense_sigma(&f, &diag, eta2).unwrap();
        let oracle: f64 = y
            .iter()
            .zip(dense_solve(&sigma, n, &y))
            .map(|(a, b)| a * b)
            .sum();
        assert!(rel_err(lhs, rhs) < 1e-8, "case {case}: {lhs} vs {rhs}");
        assert!(
            rel_err(rhs, oracle) < 1e-8,
            "case {case}: {rhs} vs {oracle}"
        );

        // any θ gives an upper bound on YᵀΣ⁻¹Y
        let k = diag.len();
        for _ in 0..5 {
            let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let resid: f64 = (0..n)
                .map(|r| {
                    let p: f64 = (0..k).map(|i| f.get(r, i) * theta[i]).sum();
                    (y[r] - p).powi(2)
                })
                .sum();
            let quad = resid / eta2 + theta.iter().zip(&diag).map(|(t, d)| t * t / d).sum::<f64>();
            assert!(
                quad - rhs >= -1e-9 * rhs.abs().max(1.0),
                "case {case}: slack {}",
                quad - rhs
            );
        }
    }
}

/// Straight-line re-evaluation of every objective term from the eval-mode
/// feature matrix.
#[test]
fn objective_terms_match_direct_formulae() {
    let data = system4(60, 2);
    let r = RegressorMatrix::build(&data, 2, 3).unwrap();
    let mut model = small_model(2, 3, &[5], 3);
    model.raw_log_eta2 = Tensor::scalar(-1.2);
    let weights = LossWeights {
        so_weight: 0.3,
        prior_scale: 0.25,
    };
    let got = loss::evaluate_objective(&model, &r, weights, NormMode::Eval).unwrap();

    let f = model.feature_matrix(&r).unwrap();
    let theta = model.theta.data();
    let eta2 = model.eta2();
    let diag = loss::prior_diag(model.kappa(), model.lambda(), 3);
    let y = r.targets();
    let fit: f64 = (0..r.rows())
        .map(|i| (y[i] - (0..4).map(|j| f.get(i, j) * theta[j]).sum::<f64>()).powi(2))
        .sum::<f64>()
        / eta2;
    let prior: f64 = 0.25 * theta.iter().zip(&diag).map(|(t, d)| t * t / d).sum::<f64>();
    let logdet = lu_log_abs_det(&loss::dense_sigma(&f, &diag, eta2).unwrap(), r.rows());
    let so: f64 = 0.3 * 0.25 * model.blocks.iter().map(|b| b.so_penalty()).sum::<f64>();
    for (name, a, b) in [
        ("fit", got.fit, fit),
        ("theta_prior", got.theta_prior, prior),
        ("logdet", got.logdet_term, logdet),
        ("so", got.so_term, so),
        ("total", got.total, fit + prior + logdet + so),
    ] {
        assert!(rel_err(a, b) < 1e-9, "{name}: {a} vs {b}");
    }
}

#[test]
fn zero_theta_zero_so_is_fit_plus_capacity() {
    let data = system4(40, 4);
    let r = RegressorMatrix::build(&data, 1, 2).unwrap();
    let mut model = small_model(1, 2, &[4], 5);
    model.theta = Tensor::zeros(&[3]);
    let w = LossWeights {
        so_weight: 0.0,
        prior_scale: 1.0,
    };
    let got = loss::evaluate_objective(&model, &r, w, NormMode::Eval).unwrap();
    let yy: f64 = r.targets().iter().map(|v| v * v).sum();
    let f = model.feature_matrix(&r).unwrap();
    let cap = loss::logdet_capacity_value(&f, &loss::prior_diag(1.0, 0.9, 2), 1.0).unwrap();
    assert_eq!(got.theta_prior, 0.0);
    assert!(rel_err(got.total, yy + cap) < 1e-12);
}

#[test]
fn single_row_batch_in_train_mode_is_contract_error() {
    let data = system4(30, 4);
    let r = RegressorMatrix::build(&data, 2, 2).unwrap().slice(0, 1);
    let model = small_model(2, 2, &[4], 5);
    let e = loss::evaluate_objective(&model, &r, LossWeights::default(), NormMode::Train);
    assert!(matches!(e, Err(fading::Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capacity_term_never_below_noise_floor(
        seed in any::<u64>(),
        log_lambda in -14.0f64..-0.01,
    ) {
        // log|FΛFᵀ + η²I| ≥ N log η² for any PSD FΛFᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, _, eta2, _) = instance(&mut rng);
        let k = f.shape()[1];
        let diag = loss::prior_diag(1.0, log_lambda.exp(), k - 1);
        let v = loss::logdet_capacity_value(&f, &diag, eta2).unwrap();
        let floor = f.shape()[0] as f64 * eta2.ln();
        prop_assert!(v >= floor - 1e-9 * floor.abs().max(1.0));
    }
}
