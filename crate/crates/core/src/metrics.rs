//! η̂, generalization gap and block relevance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FadingModel, RegressorMatrix};

/// Root mean squared one-step error, `sqrt(Σ (y − ŷ)² / N)`.
pub fn eta_hat(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::Contract(format!(
            "eta_hat needs equal lengths, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Contract("eta_hat of an empty sequence".into()));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Per-block importance `mean |θ_i f̄_i|` and the RMS residual of the
/// predictor truncated after block `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRelevance {
    pub importance: Vec<f64>,
    pub truncated_std: Vec<f64>,
}

/// Eval-mode relevance of every block over the rows of `r`.
pub fn block_relevance(model: &FadingModel, r: &RegressorMatrix) -> Result<BlockRelevance> {
    let features = model.feature_matrix(r)?;
    let theta = model.theta.data();
    let k = theta.len();
    let rows = r.rows();
    let y = r.targets();

    let mut importance = vec![0.0; k];
    let mut partial = vec![0.0; rows];
    let mut truncated_std = Vec::with_capacity(k);
    // Accumulates in block order, the same order as the F·θ product, so the
    // last entry reproduces the model's η̂ bit for bit.
    for (i, &th) in theta.iter().enumerate() {
        for (row, acc) in partial.iter_mut().enumerate() {
            let c = features.get(row, i) * th;
            importance[i] += c.abs();
            *acc += c;
        }
        truncated_std.push(eta_hat(y, &partial)?);
    }
    importance.iter_mut().for_each(|v| *v /= rows as f64);
    Ok(BlockRelevance {
        importance,
        truncated_std,
    })
}

/// Final evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eta_hat_train: f64,
    pub eta_hat_test: f64,
    pub eta_true: f64,
    pub gap: f64,
    /// Empty for models without block structure.
    #[serde(default)]
    pub relevance: Vec<f64>,
    #[serde(default)]
    pub truncated_std: Vec<f64>,
}

impl EvalReport {
    pub fn new(eta_hat_train: f64, eta_hat_test: f64, eta_true: f64) -> Self {
        EvalReport {
            eta_hat_train,
            eta_hat_test,
            eta_true,
            gap: eta_hat_test - eta_hat_train,
            relevance: Vec::new(),
            truncated_std: Vec::new(),
        }
    }
}
