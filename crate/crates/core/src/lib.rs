//! Mixed-precision quantized encoder toolkit.
//!
//! Quantizers and activations, batch and bit-shift normalization, a small
//! reverse-mode training engine, the encoder/classifier and decoder
//! topologies, an integer-only inference path, an analytic hardware cost
//! model, and a patch-based image codec.

pub mod activation;
pub mod autograd;
pub mod codec;
pub mod cost;
pub mod data;
pub mod error;
pub mod integer;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod ops;
pub mod purenet;
pub mod quant;
pub mod tensor;
pub mod topology;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
