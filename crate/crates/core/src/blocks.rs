//! Elementary block networks, their soft-orthogonality penalty, and the
//! shared-affine normalization applied across the bank of block outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default ε₁ guarding the normalizer.
pub const BN_EPSILON: f64 = 1e-5;
/// Default running-statistics momentum ρ.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `n_l × n_{l-1}`.
    pub weight: Tensor,
    /// Length `n_l`.
    pub bias: Tensor,
}

/// A fully connected network `s_l = W_l h_{l-1} + b_l`, `h_l = g(s_l)`, with
/// no activation after the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBlock {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpBlock {
    /// Fan-in uniform initialization, `U(-1/√n_{l-1}, 1/√n_{l-1})`, zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(
                "dims",
                "need at least input and output sizes",
            ));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("dims[{pos}]"), "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, data).expect("sized above"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(MlpBlock { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[0])
    }

    /// `[n_0, n_1, ..., n_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.shape()[0]));
        dims
    }

    /// `Σ (n_{l-1} + 1) n_l`.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Attaches leaves taken in [`MlpBlock::parameters`] order.
    pub fn vars_from<'t>(&self, leaves: &[Var<'t>]) -> BlockVars<'t> {
        debug_assert_eq!(leaves.len(), 2 * self.layers.len());
        BlockVars {
            layers: leaves.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
            activation: self.activation,
        }
    }

    /// Records every weight as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BlockVars<'t> {
        let leaves: Vec<_> = self
            .parameters()
            .into_iter()
            .map(|p| tape.leaf(p.clone()))
            .collect();
        self.vars_from(&leaves)
    }

    /// Block output for a `batch × n_0` window matrix, as `batch × n_L`.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        Ok(vars.forward(tape.constant(window.clone()))?.value())
    }

    /// `Σ_l ‖W_lᵀ W_l − I‖_F²`; biases are not penalized.
    pub fn so_penalty(&self) -> f64 {
        let tape = Tape::new();
        self.bind(&tape)
            .so_penalty()
            .expect("layer shapes are consistent")
            .item()
    }
}

/// Tape handles for one block's parameters.
#[derive(Clone, Debug)]
pub struct BlockVars<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
    pub activation: Activation,
}

impl<'t> BlockVars<'t> {
    pub fn forward(&self, window: Var<'t>) -> Result<Var<'t>> {
        let expected = self.layers[0].0.shape()[1];
        let shape = window.shape();
        if shape.len() != 2 || shape[1] != expected {
            return Err(Error::dim("block_forward", &shape, &[expected]));
        }
        let last = self.layers.len() - 1;
        let mut h = window;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let s = h.matmul(w.transpose()?)?.add_row(b)?;
            h = if l == last {
                s
            } else {
                s.activate(self.activation)
            };
        }
        Ok(h)
    }

    pub fn so_penalty(&self) -> Result<Var<'t>> {
        let mut total: Option<Var<'t>> = None;
        for &(w, _) in &self.layers {
            let cols = w.shape()[1];
            let eye = w.tape().constant(Tensor::eye(cols));
            let term = w.transpose()?.matmul(w)?.sub(eye)?.square().sum();
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::Contract("block without layers".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics per block plus the single shared affine `(γ, β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockBankNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BlockBankNormState {
    pub fn new(columns: usize) -> Self {
        BlockBankNormState {
            running_mean: vec![0.0; columns],
            running_var: vec![1.0; columns],
            gamma: Tensor::scalar(1.0),
            beta: Tensor::scalar(0.0),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn columns(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes a `batch × columns` bank and applies the shared affine.
    ///
    /// Train mode standardizes by batch statistics and folds them into the
    /// running averages; eval mode reads the running averages only.
    pub fn normalize<'t>(
        &mut self,
        raw: Var<'t>,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: NormMode,
    ) -> Result<Var<'t>> {
        let shape = raw.shape();
        let (rows, cols) = match shape[..] {
            [r, c] => (r, c),
            _ => return Err(Error::dim("normalize_bank", &shape, &[self.columns()])),
        };
        if cols != self.columns() {
            return Err(Error::dim("normalize_bank", &shape, &[self.columns()]));
        }
        let tape = raw.tape();
        let xhat = match mode {
            NormMode::Train => {
                if rows < 2 {
                    return Err(Error::Contract(format!(
                        "train-mode normalization needs a batch of at least 2 rows, got {rows}"
                    )));
                }
                let mean = raw.mean_axis(0)?;
                let centered = raw.add_row(mean.scale(-1.0))?;
                let var = centered.square().mean_axis(0)?;
                let inv_std = var.shift(self.epsilon).powf(-0.5)?;
                let rho = self.momentum;
                for (rm, m) in self.running_mean.iter_mut().zip(mean.value_ref().data()) {
                    *rm = (1.0 - rho) * *rm + rho * m;
                }
                for (rv, v) in self.running_var.iter_mut().zip(var.value_ref().data()) {
                    *rv = (1.0 - rho) * *rv + rho * v;
                }
                centered.mul_row(inv_std)?
            }
            NormMode::Eval => {
                let neg_mean = tape.constant(Tensor::vector(
                    self.running_mean.iter().map(|m| -m).collect(),
                ));
                let inv_std = tape.constant(Tensor::vector(
                    self.running_var
                        .iter()
                        .map(|v| 1.0 / (v + self.epsilon).sqrt())
                        .collect(),
                ));
                raw.add_row(neg_mean)?.mul_row(inv_std)?
            }
        };
        xhat.mul(gamma)?.add(beta)
    }
}
