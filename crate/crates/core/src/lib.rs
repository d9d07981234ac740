//! Three-branch ensemble image classifier on a from-scratch autodiff engine.
//!
//! A depthwise-separable convolution branch ([`mobile`]), a densely
//! connected branch ([`dense`]) and a Vision Transformer branch ([`vit`]) each
//! reduce an image to a feature vector. [`ensemble`] concatenates the three
//! vectors and classifies them with a batch-norm / dense / dropout head.
//! [`train`] fits the head (or the whole model) with Adam on categorical
//! cross-entropy, and [`metrics`] scores predictions.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dense;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod mobile;
pub mod module;
pub mod tensor;
pub mod train;
pub mod vit;

pub use ensemble::{build_ensemble, EnsembleConfig, EnsembleModel};
pub use error::{Error, Result};
pub use module::{Mode, Module, ParamKind, Parameter, Snapshot};
pub use tensor::{Gradients, Tape, Tensor, Var};
