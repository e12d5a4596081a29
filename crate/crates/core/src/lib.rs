//! Quantization-aware training for variational Bayesian fault classifiers.

pub mod bnn;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tradeoff;
pub mod uncertainty;

pub use error::{Error, Result};
