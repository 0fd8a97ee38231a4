//! Deepfake-detector benchmarking: GenConViT-style dual-network detectors,
//! lightweight baselines, a frame-sequence data pipeline, a fine-tuning loop
//! and a binary-classification metrics harness.
//!
//! All numerics run at `f64` on a small reverse-mode autodiff tape
//! ([`autodiff::Graph`]); model weights live in a [`layers::ParamStore`].

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod genconvit;
pub mod layers;
pub mod nn;
pub mod resample;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
