//! The fading architecture `F = Σ_i θ_i f̄_{W_i}` over lagged windows, and
//! the unstructured baseline network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Activation, Tape, Var};
use crate::benchmarks::TimeSeriesDataset;
use crate::blocks::{BlockBankNormState, BlockVars, MlpBlock, NormMode};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

/// Initial fading rate λ₀.
pub const INIT_LAMBDA: f64 = 0.9;
/// Initial prior scale κ₀.
pub const INIT_KAPPA: f64 = 1.0;

const EVAL_CHUNK: usize = 1024;

/// Lagged block windows and aligned targets.
///
/// Row `r` corresponds to time `t = times[r]`; block `i`'s window is
/// `[y_{t-i-1}, u_{t-i-1}, ..., y_{t-i-p}, u_{t-i-p}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorMatrix {
    p: usize,
    blocks: usize,
    /// `rows × blocks × 2p`, row-major.
    windows: Vec<f64>,
    targets: Vec<f64>,
    times: Vec<usize>,
}

impl RegressorMatrix {
    pub fn build(data: &TimeSeriesDataset, p: usize, n_b: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("p", "must be positive"));
        }
        let horizon = n_b + p;
        let n = data.len();
        if n <= horizon {
            return Err(Error::Data(format!(
                "series of length {n} too short: need at least {} samples for n_B={n_b}, p={p}",
                horizon + 1
            )));
        }
        let blocks = n_b + 1;
        let rows = n - horizon;
        let mut windows = Vec::with_capacity(rows * blocks * 2 * p);
        let mut targets = Vec::with_capacity(rows);
        let mut times = Vec::with_capacity(rows);
        for t in horizon..n {
            for i in 0..blocks {
                for j in 1..=p {
                    windows.push(data.y[t - i - j]);
                    windows.push(data.u[t - i - j]);
                }
            }
            targets.push(data.y[t]);
            times.push(t);
        }
        Ok(RegressorMatrix {
            p,
            blocks,
            windows,
            targets,
            times,
        })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_b(&self) -> usize {
        self.blocks - 1
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn width(&self) -> usize {
        2 * self.p
    }

    /// The window of `block` for `row`.
    pub fn window(&self, row: usize, block: usize) -> &[f64] {
        let w = self.width();
        let start = (row * self.blocks + block) * w;
        &self.windows[start..start + w]
    }

    /// `rows × 2p` matrix of one block's windows.
    pub fn block_windows(&self, block: usize) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(self.rows() * w);
        for r in 0..self.rows() {
            data.extend_from_slice(self.window(r, block));
        }
        Tensor::matrix(self.rows(), w, data).expect("sized above")
    }

    /// The rows listed in `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> RegressorMatrix {
        let stride = self.blocks * self.width();
        let mut windows = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            windows.extend_from_slice(&self.windows[r * stride..(r + 1) * stride]);
        }
        RegressorMatrix {
            p: self.p,
            blocks: self.blocks,
            windows,
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
        }
    }

    /// Contiguous row range.
    pub fn slice(&self, start: usize, end: usize) -> RegressorMatrix {
        self.select(&(start..end).collect::<Vec<_>>())
    }
}

/// Architecture of one block: hidden widths and activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl BlockShape {
    pub fn dims(&self, input: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims
    }
}

/// Derives independent sub-seeds from one run seed.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Blocks, recombination weights, bank normalization and the loss
/// hyper-parameters in unconstrained form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadingModel {
    pub p: usize,
    pub n_b: usize,
    pub blocks: Vec<MlpBlock>,
    pub theta: Tensor,
    pub norm: BlockBankNormState,
    /// `λ = sigmoid(raw_lambda)`.
    pub raw_lambda: Tensor,
    /// `κ = softplus(raw_kappa)`.
    pub raw_kappa: Tensor,
    /// `η² = exp(raw_log_eta2)`.
    pub raw_log_eta2: Tensor,
}

/// Tape handles for every trainable quantity of a [`FadingModel`].
pub struct FadingVars<'t> {
    pub blocks: Vec<BlockVars<'t>>,
    pub theta: Var<'t>,
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    pub raw_lambda: Var<'t>,
    pub raw_kappa: Var<'t>,
    pub raw_log_eta2: Var<'t>,
}

impl FadingModel {
    pub fn new(p: usize, n_b: usize, shape: &BlockShape, seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("p", "must be positive"));
        }
        let dims = shape.dims(2 * p);
        let blocks = (0..=n_b)
            .map(|i| MlpBlock::init(&dims, shape.activation, sub_seed(seed, i as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;
        let theta = (0..=n_b)
            .map(|i| (INIT_KAPPA * INIT_LAMBDA.powi(i as i32)).sqrt())
            .collect();
        Ok(FadingModel {
            p,
            n_b,
            blocks,
            theta: Tensor::vector(theta),
            norm: BlockBankNormState::new(n_b + 1),
            raw_lambda: Tensor::scalar(logit(INIT_LAMBDA)),
            raw_kappa: Tensor::scalar(softplus_inv(INIT_KAPPA)),
            raw_log_eta2: Tensor::scalar(0.0),
        })
    }

    pub fn horizon(&self) -> usize {
        self.n_b + self.p
    }

    pub fn lambda(&self) -> f64 {
        sigmoid(self.raw_lambda.item())
    }

    pub fn kappa(&self) -> f64 {
        softplus(self.raw_kappa.item())
    }

    pub fn eta2(&self) -> f64 {
        self.raw_log_eta2.item().exp()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Block weights first, then θ, γ, β and the raw hyper-parameters.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(MlpBlock::parameters).collect();
        out.extend([
            &self.theta,
            &self.norm.gamma,
            &self.norm.beta,
            &self.raw_lambda,
            &self.raw_kappa,
            &self.raw_log_eta2,
        ]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .blocks
            .iter_mut()
            .flat_map(MlpBlock::parameters_mut)
            .collect();
        out.extend([
            &mut self.theta,
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.raw_lambda,
            &mut self.raw_kappa,
            &mut self.raw_log_eta2,
        ]);
        out
    }

    /// Structures leaves recorded in [`FadingModel::parameters`] order.
    pub fn vars_from<'t>(&self, leaves: &[Var<'t>]) -> FadingVars<'t> {
        let mut offset = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let n = 2 * b.layers.len();
                let v = b.vars_from(&leaves[offset..offset + n]);
                offset += n;
                v
            })
            .collect();
        let rest = &leaves[offset..];
        FadingVars {
            blocks,
            theta: rest[0],
            gamma: rest[1],
            beta: rest[2],
            raw_lambda: rest[3],
            raw_kappa: rest[4],
            raw_log_eta2: rest[5],
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> (Vec<Var<'t>>, FadingVars<'t>) {
        let leaves: Vec<_> = self
            .parameters()
            .into_iter()
            .map(|p| tape.leaf(p.clone()))
            .collect();
        let vars = self.vars_from(&leaves);
        (leaves, vars)
    }

    fn check_regressors(&self, r: &RegressorMatrix) -> Result<()> {
        if r.p() != self.p || r.n_b() != self.n_b {
            return Err(Error::Contract(format!(
                "regressors built for p={}, n_B={} but model has p={}, n_B={}",
                r.p(),
                r.n_b(),
                self.p,
                self.n_b
            )));
        }
        Ok(())
    }

    /// Normalized bank `f̄`, `batch × (n_B+1)`.
    pub fn feature_matrix_on<'t>(
        &self,
        norm: &mut BlockBankNormState,
        vars: &FadingVars<'t>,
        r: &RegressorMatrix,
        mode: NormMode,
    ) -> Result<Var<'t>> {
        self.check_regressors(r)?;
        let tape = vars.theta.tape();
        let outputs = vars
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.forward(tape.constant(r.block_windows(i))))
            .collect::<Result<Vec<_>>>()?;
        let raw = tape.concat_cols(&outputs)?;
        norm.normalize(raw, vars.gamma, vars.beta, mode)
    }

    /// `F θ` as a length-`batch` vector.
    pub fn predict_from_features<'t>(features: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
        let k = theta.shape().iter().product::<usize>();
        let rows = features.shape()[0];
        features.matmul(theta.reshape(&[k, 1])?)?.reshape(&[rows])
    }

    /// Train-mode forward that updates the running statistics.
    pub fn forward_train(&mut self, r: &RegressorMatrix) -> Result<Tensor> {
        let tape = Tape::new();
        let (_, vars) = self.bind(&tape);
        let mut norm = self.norm.clone();
        let f = self.feature_matrix_on(&mut norm, &vars, r, NormMode::Train)?;
        let out = Self::predict_from_features(f, vars.theta)?.value();
        self.norm.running_mean = norm.running_mean;
        self.norm.running_var = norm.running_var;
        Ok(out)
    }

    /// Eval-mode normalized bank.
    pub fn feature_matrix(&self, r: &RegressorMatrix) -> Result<Tensor> {
        self.check_regressors(r)?;
        let chunks = eval_chunks(r);
        let parts = parallel::map_ordered(Execution::default(), chunks, |chunk| {
            let tape = Tape::new();
            let (_, vars) = self.bind(&tape);
            let mut norm = self.norm.clone();
            self.feature_matrix_on(&mut norm, &vars, &chunk, NormMode::Eval)
                .map(|v| v.value().into_data())
        });
        let mut data = Vec::with_capacity(r.rows() * (self.n_b + 1));
        for p in parts {
            data.extend(p?);
        }
        Tensor::matrix(r.rows(), self.n_b + 1, data)
    }

    /// Eval-mode one-step predictions.
    pub fn predict(&self, r: &RegressorMatrix) -> Result<Vec<f64>> {
        self.predict_with(r, Execution::default())
    }

    pub fn predict_with(&self, r: &RegressorMatrix, exec: Execution) -> Result<Vec<f64>> {
        self.check_regressors(r)?;
        let parts = parallel::map_ordered(exec, eval_chunks(r), |chunk| {
            let tape = Tape::new();
            let (_, vars) = self.bind(&tape);
            let mut norm = self.norm.clone();
            let f = self.feature_matrix_on(&mut norm, &vars, &chunk, NormMode::Eval)?;
            Ok::<_, Error>(
                Self::predict_from_features(f, vars.theta)?
                    .value()
                    .into_data(),
            )
        });
        let mut out = Vec::with_capacity(r.rows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

fn eval_chunks(r: &RegressorMatrix) -> Vec<RegressorMatrix> {
    (0..r.rows())
        .step_by(EVAL_CHUNK)
        .map(|s| r.slice(s, (s + EVAL_CHUNK).min(r.rows())))
        .collect()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// A single network over the full `2T` regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainDnn {
    pub horizon: usize,
    pub block: MlpBlock,
}

impl PlainDnn {
    pub fn new(horizon: usize, shape: &BlockShape, seed: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon", "must be positive"));
        }
        Ok(PlainDnn {
            horizon,
            block: MlpBlock::init(
                &shape.dims(2 * horizon),
                shape.activation,
                sub_seed(seed, 1),
            )?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.block.parameter_count()
    }

    /// Full-horizon regressors: one window of length `2T`.
    pub fn regressors(&self, data: &TimeSeriesDataset) -> Result<RegressorMatrix> {
        RegressorMatrix::build(data, self.horizon, 0)
    }

    fn check_regressors(&self, r: &RegressorMatrix) -> Result<()> {
        if r.p() != self.horizon || r.n_b() != 0 {
            return Err(Error::Contract(format!(
                "plain network expects one window of horizon {}, got p={}, n_B={}",
                self.horizon,
                r.p(),
                r.n_b()
            )));
        }
        Ok(())
    }

    pub fn forward_on<'t>(&self, vars: &BlockVars<'t>, r: &RegressorMatrix) -> Result<Var<'t>> {
        self.check_regressors(r)?;
        let tape = vars.layers[0].0.tape();
        let out = vars.forward(tape.constant(r.block_windows(0)))?;
        out.reshape(&[r.rows()])
    }

    pub fn predict(&self, r: &RegressorMatrix) -> Result<Vec<f64>> {
        self.predict_with(r, Execution::default())
    }

    pub fn predict_with(&self, r: &RegressorMatrix, exec: Execution) -> Result<Vec<f64>> {
        self.check_regressors(r)?;
        let parts = parallel::map_ordered(exec, eval_chunks(r), |chunk| {
            self.block
                .forward(&chunk.block_windows(0))
                .map(Tensor::into_data)
        });
        let mut out = Vec::with_capacity(r.rows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::SystemId;

    fn series(y: Vec<f64>, u: Vec<f64>) -> TimeSeriesDataset {
        TimeSeriesDataset {
            system: SystemId::S4,
            seed: 0,
            burn_in: 0,
            u,
            y,
        }
    }

    fn shape() -> BlockShape {
        BlockShape {
            hidden: vec![5],
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn hand_built_windows() {
        let d = series(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]);
        let r = RegressorMatrix::build(&d, 2, 1).unwrap();
        assert_eq!(r.rows(), 1);
        assert_eq!(r.window(0, 0), &[3.0, 3.0, 2.0, 2.0]);
        assert_eq!(r.window(0, 1), &[2.0, 2.0, 1.0, 1.0]);
        assert_eq!(r.targets(), &[4.0]);
    }

    #[test]
    fn single_block_is_full_window() {
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let u: Vec<f64> = y.iter().map(|v| -v).collect();
        let d = series(y, u);
        let r = RegressorMatrix::build(&d, 3, 0).unwrap();
        assert_eq!(r.rows(), 7);
        assert_eq!(r.window(0, 0), &[2.0, -2.0, 1.0, -1.0, 0.0, -0.0]);
    }

    #[test]
    fn too_short_series_names_minimum() {
        let d = series(vec![0.0; 3], vec![0.0; 3]);
        match RegressorMatrix::build(&d, 2, 1).unwrap_err() {
            Error::Data(msg) => assert!(msg.contains("at least 4"), "{msg}"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn zero_theta_predicts_zero() {
        let y: Vec<f64> = (0..20).map(|t| (t as f64 * 0.3).sin()).collect();
        let d = series(y.clone(), y);
        let mut m = FadingModel::new(2, 3, &shape(), 1).unwrap();
        m.theta = Tensor::zeros(&[4]);
        let r = RegressorMatrix::build(&d, 2, 3).unwrap();
        assert!(m.predict(&r).unwrap().iter().all(|&v| v == 0.0));
        assert!(m
            .forward_train(&r)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_block_reduction() {
        let y: Vec<f64> = (0..12).map(|t| (t as f64 * 0.7).cos()).collect();
        let u: Vec<f64> = (0..12).map(|t| (t as f64 * 0.2).sin()).collect();
        let d = series(y, u);
        let mut m = FadingModel::new(2, 0, &shape(), 4).unwrap();
        m.theta = Tensor::vector(vec![1.7]);
        let r = RegressorMatrix::build(&d, 2, 0).unwrap();
        let pred = m.predict(&r).unwrap();
        let raw = m.blocks[0].forward(&r.block_windows(0)).unwrap();
        let eps_scale = 1.0 / (1.0 + m.norm.epsilon).sqrt();
        for (p, f) in pred.iter().zip(raw.data()) {
            assert!((p - 1.7 * f * eps_scale).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_regressors_rejected() {
        let d = series(vec![0.5; 20], vec![0.1; 20]);
        let m = FadingModel::new(2, 3, &shape(), 1).unwrap();
        let r = RegressorMatrix::build(&d, 3, 3).unwrap();
        assert!(matches!(m.predict(&r), Err(Error::Contract(_))));
    }

    #[test]
    fn reparametrizations_start_at_documented_values() {
        let m = FadingModel::new(2, 3, &shape(), 1).unwrap();
        assert!((m.lambda() - INIT_LAMBDA).abs() < 1e-14);
        assert!((m.kappa() - INIT_KAPPA).abs() < 1e-14);
        assert_eq!(m.eta2(), 1.0);
        assert!((m.theta.data()[2] - 0.81f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn plain_matches_its_block() {
        let y: Vec<f64> = (0..30).map(|t| (t as f64 * 0.37).sin()).collect();
        let d = series(y.clone(), y);
        let net = PlainDnn::new(4, &shape(), 2).unwrap();
        let r = net.regressors(&d).unwrap();
        let direct = net.block.forward(&r.block_windows(0)).unwrap();
        assert_eq!(net.predict(&r).unwrap(), direct.into_data());
    }
}
