//! Counterfactually decoupled attention learning for open-world model attribution.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f64 tensors, reverse-mode autodiff tape, CDT1 serialization.
//! - [`ce_conv`]: input-gated mixture-of-experts convolution.
//! - [`attention`]: factual / counterfactual attention extraction and pooling.
//! - [`augment`]: causal attention augmentation.
//! - [`losses`]: causal-effect, decorrelation, diversification and baseline losses.
//! - [`synth`]: seeded synthetic attribution benchmark.
//! - [`eval`]: open-set metrics, k-means discovery, evaluation reports.
//! - [`model`], [`trainer`]: backbone plus attention stack and the training loop.

pub mod attention;
pub mod augment;
pub mod ce_conv;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{CdalError, Result};
pub use tensor::{Tape, Tensor, Var};
