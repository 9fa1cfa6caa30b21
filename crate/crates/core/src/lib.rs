//! Discrete adversarial distillation.
//!
//! A robust teacher generates adversarial examples that are projected back
//! onto a learned image manifold by a vector-quantized autoencoder. The
//! augmented samples are cached once and distilled into a student together
//! with the clean data. The crate also carries executable checks of the
//! Wasserstein-distance arguments that motivate the method.

pub mod adversary;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod discretizer;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
