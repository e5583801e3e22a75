//! Adversarial-robustness laboratory for small convolutional classifiers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense n-d tensors with reverse-mode automatic
//!   differentiation (gradients w.r.t. parameters *and* inputs).
//! - [`reference`]: brute-force direct-loop kernels kept independent of the
//!   optimized paths, used as numerical oracles.
//! - [`nn`]: layers, losses and the model builders (LeNet5 classifier,
//!   convolutional autoencoder, the AE-C whole classifier and the
//!   encoder-classifier joint model).
//! - [`train`]: Adam optimizer and the training regimes (standard, joint
//!   regularized, joint alternative, PGD-adversarial).
//! - [`attack`]: FGSM, PGD, Carlini-Wagner, DeepFool and the black-box
//!   substitute protocol.
//! - [`analysis`]: accuracy grids, gradient-amplitude diagnostics and
//!   gradient-masking reports.
//! - [`data`]: bit-exact MNIST IDX and CIFAR10 binary parsers.
//! - [`checkpoint`]: manifest + raw-f64-blob model serialization.
//! - [`report`]: CSV/JSON experiment reports.
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`]; the
//! experiment stack is pinned to `f64` through the [`Tensor`] / [`Tape`]
//! aliases below, because the finite-difference oracles and the bitwise
//! reproducibility contracts are specified at 64-bit precision.

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod nn;
pub mod reference;
pub mod report;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

/// Concrete 64-bit tensor used by the whole experiment stack.
pub type Tensor = tensor::TensorBase<f64>;
/// Concrete 64-bit gradient tape.
pub type Tape = tape::TapeBase<f64>;
/// Tracked value on a 64-bit tape.
pub type Var<'t> = tape::Var<'t, f64>;

/// Single-precision aliases for callers that trade precision for memory.
pub type Tensor32 = tensor::TensorBase<f32>;
pub type Tape32 = tape::TapeBase<f32>;

/// Crate version embedded in reports and checkpoint manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
