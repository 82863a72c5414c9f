//! Desk-scale masked diffusion language model with a sparse
//! Mixture-of-Experts transformer backbone.
//!
//! The crate covers the full pipeline: forward corruption and reverse
//! transition kernels, the MoE mask-predictor transformer, diffusion and
//! auxiliary training objectives, staged training with checkpointing, and
//! semi-autoregressive block decoding with low-confidence remasking.

pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
