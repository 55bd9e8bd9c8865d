//! isquant: data-free int8 post-training quantization with a true integer
//! execution path.
//!
//! The pipeline folds batch normalization into the preceding convolutions,
//! computes symmetric per-tensor quantization parameters without any
//! training data, applies flip-based rounding calibration to weights, and
//! executes models three ways — float reference, fake-quant simulation, and
//! zero-point-free integer arithmetic — so the integer deployment path can
//! be checked bit-for-bit against the simulation.

pub mod bnfold;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod quantizer;
pub mod squant;
pub mod tensor;

pub use error::{Error, Result};
