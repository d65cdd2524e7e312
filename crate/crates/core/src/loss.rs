//! Training objective for the fading model.
//!
//! For a batch of `N` targets `Y`, normalized bank `F` (`N × k`, `k = n_B+1`),
//! prior diagonal `Λ_ii = κ λ^{i-1}` and noise variance `η²`:
//!
//! ```text
//! total = ‖Y − Fθ‖² / η²                         fit
//!       + s · θᵀ Λ⁻¹ θ                           theta_prior
//!       + log |F Λ Fᵀ + η² I|                    logdet_term
//!       + s · ν · Σ_blocks Σ_l ‖W_lᵀW_l − I‖²_F  so_term
//! ```
//!
//! where `s` is the batch's share of the dataset, so that one epoch of
//! minibatches charges the prior terms once. The log-determinant is
//! evaluated through the determinant lemma on the `k × k` matrix
//! `I + Λ^{1/2} Fᵀ F Λ^{1/2} / η²`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{BlockBankNormState, NormMode};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{FadingModel, FadingVars, RegressorMatrix};
use crate::tensor::Tensor;

pub const DEFAULT_SO_WEIGHT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// ν, the soft-orthogonality weight.
    pub so_weight: f64,
    /// Multiplier on the prior terms (batch size over dataset size).
    pub prior_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            so_weight: DEFAULT_SO_WEIGHT,
            prior_scale: 1.0,
        }
    }
}

/// Values of every objective term; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fit: f64,
    pub theta_prior: f64,
    pub logdet_term: f64,
    pub so_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("fit", self.fit),
            ("theta_prior", self.theta_prior),
            ("logdet_term", self.logdet_term),
            ("so_term", self.so_term),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.fit += other.fit;
        self.theta_prior += other.theta_prior;
        self.logdet_term += other.logdet_term;
        self.so_term += other.so_term;
        self.total += other.total;
    }
}

/// The fading prior diagonal on the tape, with its logarithm.
#[derive(Clone, Copy, Debug)]
pub struct FadingPrior<'t> {
    pub diag: Var<'t>,
    pub log_diag: Var<'t>,
}

/// `Λ_ii = κ λ^{i-1}`, `i = 1..=n_B+1`, from the raw parameters.
pub fn lambda_diag<'t>(
    raw_kappa: Var<'t>,
    raw_lambda: Var<'t>,
    n_b: usize,
) -> Result<FadingPrior<'t>> {
    let tape = raw_kappa.tape();
    let log_kappa = raw_kappa.log_softplus();
    let log_lambda = raw_lambda.log_sigmoid();
    let powers = tape.constant(Tensor::vector((0..=n_b).map(|i| i as f64).collect()));
    let log_diag = powers.mul(log_lambda)?.add(log_kappa)?;
    Ok(FadingPrior {
        diag: log_diag.exp(),
        log_diag,
    })
}

/// Plain-value prior diagonal.
pub fn prior_diag(kappa: f64, lambda: f64, n_b: usize) -> Vec<f64> {
    (0..=n_b).map(|i| kappa * lambda.powi(i as i32)).collect()
}

/// `log |Λ| = Σ log(κ λ^{i-1})`, the term of the naive joint MAP objective
/// that diverges as `λ → 0`.
pub fn joint_map_log_det_prior(kappa: f64, lambda: f64, n_b: usize) -> f64 {
    (0..=n_b).map(|i| kappa.ln() + i as f64 * lambda.ln()).sum()
}

/// `log |F Λ Fᵀ + η² I|` for `F` of shape `N × k`, via
/// `N log η² + log |I_k + Λ^{1/2} Fᵀ F Λ^{1/2} / η²|`.
///
/// Takes `log Λ_ii` so that vanishing prior variances stay well defined.
pub fn logdet_capacity<'t>(
    features: Var<'t>,
    log_diag: Var<'t>,
    log_eta2: Var<'t>,
) -> Result<Var<'t>> {
    let shape = features.shape();
    let (n, k) = match shape[..] {
        [n, k] if n >= 1 => (n, k),
        _ => return Err(Error::dim("logdet_capacity", &shape, &[])),
    };
    let tape = features.tape();
    let scaled = features.mul_row(log_diag.scale(0.5).exp())?;
    let gram = scaled.transpose()?.matmul(scaled)?;
    let inner = gram
        .mul(log_eta2.scale(-1.0).exp())?
        .add(tape.constant(Tensor::eye(k)))?;
    inner.logdet_spd()?.add(log_eta2.scale(n as f64))
}

/// Plain-value [`logdet_capacity`].
pub fn logdet_capacity_value(features: &Tensor, diag: &[f64], eta2: f64) -> Result<f64> {
    let tape = Tape::new();
    let f = tape.constant(features.clone());
    let d = tape.constant(Tensor::vector(diag.iter().map(|v| v.ln()).collect()));
    let le = tape.scalar(eta2.ln());
    Ok(logdet_capacity(f, d, le)?.item())
}

/// Recorded objective: the scalar to differentiate plus its breakdown.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub features: Var<'t>,
    pub predictions: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Builds the full objective on `vars`' tape, normalizing in `mode`.
pub fn objective<'t>(
    model: &FadingModel,
    vars: &FadingVars<'t>,
    norm: &mut BlockBankNormState,
    batch: &RegressorMatrix,
    weights: LossWeights,
    mode: NormMode,
) -> Result<Objective<'t>> {
    if batch.is_empty() {
        return Err(Error::Contract("objective on an empty batch".into()));
    }
    let tape = vars.theta.tape();
    let features = model.feature_matrix_on(norm, vars, batch, mode)?;
    let predictions = FadingModel::predict_from_features(features, vars.theta)?;

    let inv_eta2 = vars.raw_log_eta2.scale(-1.0).exp();
    let targets = tape.constant(Tensor::vector(batch.targets().to_vec()));
    let fit = targets.sub(predictions)?.square().sum().mul(inv_eta2)?;

    let prior = lambda_diag(vars.raw_kappa, vars.raw_lambda, model.n_b)?;
    let theta_prior = vars
        .theta
        .square()
        .mul(prior.log_diag.scale(-1.0).exp())?
        .sum()
        .scale(weights.prior_scale);

    let logdet = logdet_capacity(features, prior.log_diag, vars.raw_log_eta2)?;

    let mut total = fit.add(theta_prior)?.add(logdet)?;
    let mut so_value = 0.0;
    if weights.so_weight != 0.0 {
        let mut so: Option<Var<'t>> = None;
        for b in &vars.blocks {
            let p = b.so_penalty()?;
            so = Some(match so {
                Some(acc) => acc.add(p)?,
                None => p,
            });
        }
        if let Some(so) = so {
            let so = so.scale(weights.so_weight * weights.prior_scale);
            so_value = so.item();
            total = total.add(so)?;
        }
    }

    let breakdown = LossBreakdown {
        fit: fit.item(),
        theta_prior: theta_prior.item(),
        logdet_term: logdet.item(),
        so_term: so_value,
        total: total.item(),
    };
    Ok(Objective {
        total,
        features,
        predictions,
        breakdown,
    })
}

/// Evaluates the objective on a fresh tape without gradients.
pub fn evaluate_objective(
    model: &FadingModel,
    batch: &RegressorMatrix,
    weights: LossWeights,
    mode: NormMode,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let (_, vars) = model.bind(&tape);
    let mut norm = model.norm.clone();
    Ok(objective(model, &vars, &mut norm, batch, weights, mode)?.breakdown)
}

/// Both sides of `min_θ ‖Y−Fθ‖²/η² + θᵀΛ⁻¹θ = Yᵀ Σ⁻¹ Y`, `Σ = FΛFᵀ + η²I`.
///
/// The left side is the quadratic at its closed-form minimizer; the right
/// side is a dense `N × N` solve.
pub fn ridge_identity_check(
    features: &Tensor,
    diag: &[f64],
    eta2: f64,
    y: &[f64],
) -> Result<(f64, f64)> {
    let (n, k) = features.dims2("ridge_identity_check")?;
    if diag.len() != k || y.len() != n {
        return Err(Error::dim(
            "ridge_identity_check",
            &[n, k],
            &[y.len(), diag.len()],
        ));
    }
    let f = features.data();

    // (FᵀF/η² + Λ⁻¹) θ = FᵀY/η²
    let mut a = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for r in 0..n {
        let row = &f[r * k..(r + 1) * k];
        for i in 0..k {
            rhs[i] += row[i] * y[r] / eta2;
            for j in 0..k {
                a[i * k + j] += row[i] * row[j] / eta2;
            }
        }
    }
    for i in 0..k {
        a[i * k + i] += 1.0 / diag[i];
    }
    let theta = linalg::solve_spd(&a, k, &rhs)?;
    let resid: f64 = (0..n)
        .map(|r| {
            let fit: f64 = (0..k).map(|i| f[r * k + i] * theta[i]).sum();
            (y[r] - fit).powi(2)
        })
        .sum();
    let prior: f64 = theta.iter().zip(diag).map(|(t, d)| t * t / d).sum();
    let lhs = resid / eta2 + prior;

    let sigma = dense_sigma(features, diag, eta2)?;
    let solved = linalg::solve_spd(&sigma, n, y)?;
    let rhs_value: f64 = y.iter().zip(&solved).map(|(a, b)| a * b).sum();
    Ok((lhs, rhs_value))
}

/// `F Λ Fᵀ + η² I`, row-major `N × N`.
pub fn dense_sigma(features: &Tensor, diag: &[f64], eta2: f64) -> Result<Vec<f64>> {
    let (n, k) = features.dims2("dense_sigma")?;
    let f = features.data();
    let mut sigma = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s: f64 = (0..k).map(|c| f[i * k + c] * diag[c] * f[j * k + c]).sum();
            if i == j {
                s += eta2;
            }
            sigma[i * n + j] = s;
        }
    }
    Ok(sigma)
}
