use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::benchmarks::{SystemId, DEFAULT_BURN_IN};
use crate::error::{Error, Result};
use crate::loss::DEFAULT_SO_WEIGHT;
use crate::model::BlockShape;
use crate::optim::{OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Fading { n_b: usize, p: usize },
    Plain { horizon: usize },
}

impl ModelSpec {
    /// Past samples each prediction reads.
    pub fn horizon(&self) -> usize {
        match *self {
            ModelSpec::Fading { n_b, p } => n_b + p,
            ModelSpec::Plain { horizon } => horizon,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ModelSpec::Fading { n_b, p } => format!("fading(n_b={n_b},p={p})"),
            ModelSpec::Plain { horizon } => format!("plain(T={horizon})"),
        }
    }
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32, 32]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_so_weight() -> f64 {
    DEFAULT_SO_WEIGHT
}
fn default_batch_size() -> usize {
    64
}
fn default_eval_every() -> usize {
    10
}
fn default_runs() -> usize {
    5
}

/// One experiment: data generation, architecture, objective, optimizer and
/// Monte Carlo settings. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemId,
    pub n_train: usize,
    /// Test trajectory length; defaults to `n_train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub model: ModelSpec,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// ν; ignored by the plain baseline.
    #[serde(default = "default_so_weight")]
    pub so_weight: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for a given system and model.
    pub fn desk(system: SystemId, model: ModelSpec) -> Self {
        ExperimentConfig {
            system,
            n_train: 2000,
            n_test: None,
            burn_in: default_burn_in(),
            model,
            hidden: default_hidden(),
            activation: default_activation(),
            so_weight: default_so_weight(),
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: default_batch_size(),
            eval_every: default_eval_every(),
            runs: default_runs(),
            seed: 0,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            // serde names the offending key in its message
            Error::config("config", e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("n_train", self.n_train)?;
        positive("n_test", self.test_len())?;
        positive("runs", self.runs)?;
        match self.model {
            ModelSpec::Fading { p, .. } => positive("model.p", p)?,
            ModelSpec::Plain { horizon } => positive("model.horizon", horizon)?,
        }
        let horizon = self.model.horizon();
        if self.n_train <= horizon + 1 {
            return Err(Error::config(
                "n_train",
                format!("must exceed the input horizon {horizon} by at least 2"),
            ));
        }
        if self.test_len() <= horizon {
            return Err(Error::config(
                "n_test",
                format!("must exceed the input horizon {horizon}"),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("hidden[{i}]"), "must be positive"));
        }
        if !(self.so_weight >= 0.0 && self.so_weight.is_finite()) {
            return Err(Error::config(
                "so_weight",
                "must be finite and non-negative",
            ));
        }
        let lr = match self.optimizer {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        Ok(())
    }

    pub fn test_len(&self) -> usize {
        self.n_test.unwrap_or(self.n_train)
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer.clone(),
            so_weight: self.so_weight,
            eval_every: self.eval_every,
            seed,
        }
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"system": 4, "n_train": 500, "epochs": 3,
        "model": {"kind": "fading", "n_b": 4, "p": 2}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.system, SystemId::S4);
        assert_eq!(c.hidden, vec![32, 32, 32]);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.model.horizon(), 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("\"epochs\": 3", "\"epochs\": 3, \"learning_rate\": 0.1");
        match ExperimentConfig::from_json(&text).unwrap_err() {
            Error::Config { reason, .. } => assert!(reason.contains("learning_rate"), "{reason}"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn validation_names_field() {
        let text = MINIMAL.replace("\"n_train\": 500", "\"n_train\": 5");
        match ExperimentConfig::from_json(&text).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "n_train"),
            e => panic!("{e:?}"),
        }
        let text = MINIMAL.replace("\"system\": 4", "\"system\": 9");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let h = a.hash();
        a.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), h);
        a.seed = 1;
        assert_ne!(a.hash(), h);
    }
}
