//! Semi-supervised learning for EEG-style feature data.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode autodiff tape.
//! - [`nn`]: the 1-D CNN backbone, the transposed-conv decoder, EMA copies and
//!   checkpoints.
//! - [`augment`]: additive Gaussian noise views.
//! - [`ssl`]: the nine training objectives (MixMatch, FixMatch, AdaMatch,
//!   Π-model, temporal ensembling, mean teacher, convolutional autoencoder,
//!   pseudo-labelling and supervised-only).
//! - [`signal`]: filtering, segmentation, differential-entropy features,
//!   synthetic data, dataset splits and feature files.
//! - [`train`]: Adam, the epoch loop, evaluation and the experiment grid.
//! - [`config`]: experiment configuration files and their resolved defaults.

pub mod augment;
pub mod config;
pub mod error;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod signal;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
