//! Fading-memory block networks for one-step-ahead prediction of nonlinear
//! stochastic systems.
//!
//! The predictor is a θ-weighted sum of small networks, each reading a
//! short lagged window shifted further into the past. Training minimizes a
//! Gaussian fit term plus a fading prior on θ whose hyper-parameters are
//! tuned through a marginal-likelihood upper bound, with a soft
//! orthogonality penalty on the block weights.
//!
//! Modules, bottom-up:
//! - [`autodiff`]: tape-based reverse-mode differentiation with an SPD
//!   log-determinant primitive
//! - [`blocks`]: block networks, soft orthogonality, bank normalization
//! - [`model`]: regressors, [`model::FadingModel`], [`model::PlainDnn`]
//! - [`loss`]: the training objective and its closed-form checks
//! - [`optim`]: SGD, Adam, minibatch sampling and the training loop
//! - [`benchmarks`]: the four benchmark systems
//! - [`metrics`]: η̂ and block relevance
//! - [`harness`]: configs, runs, Monte Carlo studies, file formats

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `Var::add` etc. return `Result` and cannot be the operator traits.
#![allow(clippy::should_implement_trait)]
#![allow(clippy::large_enum_variant)]

pub mod autodiff;
pub mod benchmarks;
pub mod blocks;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
