//! Minibatch optimizers and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::NormMode;
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossWeights};
use crate::metrics::{self, BlockRelevance};
use crate::model::{sub_seed, FadingModel, PlainDnn, RegressorMatrix};
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update given gradients in parameter order.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()>;
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "parameter {i} has shape {:?} but its gradient has shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μ v + g`, `p ← p − lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::Contract(
                "parameter set changed between steps".into(),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if v.len() != g.numel() {
                return Err(Error::Contract(
                    "parameter shape changed between steps".into(),
                ));
            }
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3, 0.9, 0.999, 1e-8)
    }
}

impl Optimizer for AdamState {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(grads)
                .any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::Contract(
                "parameter set changed between Adam steps".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Shuffled minibatches, one permutation per epoch.
///
/// A trailing batch of a single row is merged into the previous one, since
/// train-mode normalization needs at least two rows.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    pub rows: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl MinibatchSampler {
    pub fn new(rows: usize, batch_size: usize, seed: u64) -> Self {
        MinibatchSampler {
            rows,
            batch_size: batch_size.max(1),
            seed,
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.rows).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, epoch as u64));
        perm.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = perm
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("checked");
            batches.last_mut().expect("checked").extend(last);
        }
        batches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Box<dyn Optimizer + Send> {
        match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Box::new(AdamState::new(lr, beta1, beta2, eps)),
            OptimizerConfig::Sgd { lr, momentum } => Box::new(Sgd::new(lr, momentum)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub so_weight: f64,
    /// η̂ and relevance are evaluated every this many epochs (and at the
    /// first and last); 0 evaluates only at the ends.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            so_weight: loss::DEFAULT_SO_WEIGHT,
            eval_every: 10,
            seed: 0,
        }
    }
}

/// Something the training loop can fit.
pub trait Trainable {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records the minibatch objective on the leaves' tape.
    fn batch_objective<'t>(
        &mut self,
        leaves: &[Var<'t>],
        batch: &RegressorMatrix,
        weights: LossWeights,
    ) -> Result<(Var<'t>, LossBreakdown)>;

    fn predict(&self, r: &RegressorMatrix) -> Result<Vec<f64>>;

    /// Current `(λ, κ, η)` when the model carries them.
    fn hyper(&self) -> Option<(f64, f64, f64)> {
        None
    }

    fn relevance(&self, _r: &RegressorMatrix) -> Result<Option<BlockRelevance>> {
        Ok(None)
    }
}

impl Trainable for FadingModel {
    fn parameters(&self) -> Vec<&Tensor> {
        FadingModel::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        FadingModel::parameters_mut(self)
    }

    fn batch_objective<'t>(
        &mut self,
        leaves: &[Var<'t>],
        batch: &RegressorMatrix,
        weights: LossWeights,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let vars = self.vars_from(leaves);
        let mut norm = self.norm.clone();
        let obj = loss::objective(self, &vars, &mut norm, batch, weights, NormMode::Train)?;
        self.norm.running_mean = norm.running_mean;
        self.norm.running_var = norm.running_var;
        Ok((obj.total, obj.breakdown))
    }

    fn predict(&self, r: &RegressorMatrix) -> Result<Vec<f64>> {
        FadingModel::predict(self, r)
    }

    fn hyper(&self) -> Option<(f64, f64, f64)> {
        Some((self.lambda(), self.kappa(), self.eta2().sqrt()))
    }

    fn relevance(&self, r: &RegressorMatrix) -> Result<Option<BlockRelevance>> {
        metrics::block_relevance(self, r).map(Some)
    }
}

/// The baseline is fit by plain least squares.
impl Trainable for PlainDnn {
    fn parameters(&self) -> Vec<&Tensor> {
        self.block.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.block.parameters_mut()
    }

    fn batch_objective<'t>(
        &mut self,
        leaves: &[Var<'t>],
        batch: &RegressorMatrix,
        _weights: LossWeights,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let vars = self.block.vars_from(leaves);
        let pred = self.forward_on(&vars, batch)?;
        let tape = pred.tape();
        let y = tape.constant(Tensor::vector(batch.targets().to_vec()));
        let sse = y.sub(pred)?.square().sum();
        let v = sse.item();
        Ok((
            sse,
            LossBreakdown {
                fit: v,
                total: v,
                ..LossBreakdown::default()
            },
        ))
    }

    fn predict(&self, r: &RegressorMatrix) -> Result<Vec<f64>> {
        PlainDnn::predict(self, r)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Loss terms summed over the epoch's minibatches; absent for epoch 0.
    pub loss: Option<LossBreakdown>,
    pub lambda: Option<f64>,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub train_eta_hat: Option<f64>,
    pub val_eta_hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSnapshot {
    pub epoch: usize,
    pub relevance: BlockRelevance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub relevance: Vec<RelevanceSnapshot>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainingLog {
    pub fn first_train_eta_hat(&self) -> Option<f64> {
        self.epochs.iter().find_map(|e| e.train_eta_hat)
    }

    pub fn last_train_eta_hat(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.train_eta_hat)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,fit,theta_prior,logdet_term,so_term,total,lambda,kappa,eta,train_eta_hat,val_eta_hat\n",
        );
        for e in &self.epochs {
            let l = e.loss;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                opt(l.map(|l| l.fit)),
                opt(l.map(|l| l.theta_prior)),
                opt(l.map(|l| l.logdet_term)),
                opt(l.map(|l| l.so_term)),
                opt(l.map(|l| l.total)),
                opt(e.lambda),
                opt(e.kappa),
                opt(e.eta),
                opt(e.train_eta_hat),
                opt(e.val_eta_hat),
            );
        }
        s
    }

    /// Long-format `epoch,block,importance,truncated_std`.
    pub fn relevance_csv(&self) -> String {
        let mut s = String::from("epoch,block,importance,truncated_std\n");
        for snap in &self.relevance {
            for (i, (imp, tr)) in snap
                .relevance
                .importance
                .iter()
                .zip(&snap.relevance.truncated_std)
                .enumerate()
            {
                let _ = writeln!(s, "{},{i},{imp},{tr}", snap.epoch);
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Minimizes the model's objective by minibatch optimization.
///
/// Deterministic given `(model, data, cfg)`. `validation`, when given, is
/// evaluated alongside the training rows and used for relevance snapshots.
pub fn train<M: Trainable>(
    model: &mut M,
    train_rows: &RegressorMatrix,
    validation: Option<&RegressorMatrix>,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if train_rows.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    let mut optimizer = cfg.optimizer.build();
    let sampler = MinibatchSampler::new(train_rows.rows(), cfg.batch_size, cfg.seed);
    let mut log = TrainingLog::default();
    let relevance_rows = validation.unwrap_or(train_rows);

    let evaluate = |model: &M, log: &mut TrainingLog, epoch: usize, loss| -> Result<()> {
        let (lambda, kappa, eta) = match model.hyper() {
            Some((l, k, e)) => (Some(l), Some(k), Some(e)),
            None => (None, None, None),
        };
        let due = epoch == 0
            || epoch == cfg.epochs
            || (cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every));
        let (mut tr, mut va) = (None, None);
        if due {
            tr = Some(metrics::eta_hat(
                train_rows.targets(),
                &model.predict(train_rows)?,
            )?);
            if let Some(v) = validation {
                va = Some(metrics::eta_hat(v.targets(), &model.predict(v)?)?);
            }
            if let Some(rel) = model.relevance(relevance_rows)? {
                log.relevance.push(RelevanceSnapshot {
                    epoch,
                    relevance: rel,
                });
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            loss,
            lambda,
            kappa,
            eta,
            train_eta_hat: tr,
            val_eta_hat: va,
        });
        Ok(())
    };

    evaluate(model, &mut log, 0, None)?;
    let total_rows = train_rows.rows() as f64;
    for epoch in 1..=cfg.epochs {
        let mut sum = LossBreakdown::default();
        for rows in sampler.epoch(epoch) {
            let batch = train_rows.select(&rows);
            let weights = LossWeights {
                so_weight: cfg.so_weight,
                prior_scale: rows.len() as f64 / total_rows,
            };
            let grads = {
                let tape = Tape::new();
                let leaves: Vec<_> = model
                    .parameters()
                    .into_iter()
                    .map(|p| tape.leaf(p.clone()))
                    .collect();
                let (total, breakdown) = model.batch_objective(&leaves, &batch, weights)?;
                if let Some(term) = breakdown.non_finite_term() {
                    return Err(Error::Divergence { epoch, term });
                }
                sum.accumulate(&breakdown);
                let g = tape.backward(total)?;
                leaves.iter().map(|&l| g.wrt(l)).collect::<Vec<_>>()
            };
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    term: "gradient",
                });
            }
            optimizer.step(&mut model.parameters_mut(), &grads)?;
        }
        evaluate(model, &mut log, epoch, Some(sum))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[Tensor::scalar(2.0)]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
        let mut q = Tensor::vector(vec![3.0, -1.0]);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut [&mut q], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(q.data(), &[3.0, -1.0]);
    }

    #[test]
    fn sgd_converges_on_bowl() {
        let mut p = Tensor::scalar(5.0);
        let mut opt = Sgd::new(0.1, 0.0);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * p.item());
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.item().abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_against_gradient() {
        for g in [3.0, -0.02, 1e4] {
            let mut p = Tensor::scalar(0.0);
            let mut opt = AdamState::default();
            opt.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            let expected = -1e-3 * g.signum() * g.abs() / (g.abs() + 1e-8);
            assert!((p.item() - expected).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = AdamState::default();
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = [Tensor::zeros(&[3])];
        assert!(matches!(
            AdamState::default().step(&mut [&mut p], &g),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            Sgd::new(0.1, 0.0).step(&mut [&mut p], &g),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_moments_mirror_parameters() {
        let mut a = Tensor::zeros(&[2, 3]);
        let mut b = Tensor::scalar(1.0);
        let mut opt = AdamState::default();
        for k in 0..5 {
            let ga = Tensor::full(&[2, 3], k as f64 - 2.0);
            opt.step(&mut [&mut a, &mut b], &[ga, Tensor::scalar(0.5)])
                .unwrap();
        }
        assert_eq!(opt.m[0].shape(), a.shape());
        assert_eq!(opt.v[1].shape(), b.shape());
        assert!(opt.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn sampler_merges_trailing_singleton() {
        let s = MinibatchSampler::new(129, 64, 1);
        let b = s.epoch(1);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 65);
        assert_ne!(s.epoch(1), s.epoch(2));
        assert_eq!(s.epoch(3), s.epoch(3));
    }
}
