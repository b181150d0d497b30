//! robustlens-core: a desk-scale engine for training small convolutional
//! image classifiers, attacking them with single-step gradient-sign
//! perturbations, hardening them via adversarial training, and explaining
//! their decisions with gradient-weighted class activation heatmaps scored
//! against ground-truth masks.
//!
//! The numeric kernels are generic over the scalar type ([`Scalar`], backed
//! by `num-traits`): training runs in `f32`, gradient checking in `f64`.
//! Concrete aliases for the common instantiations live at the crate root.

pub mod adversarial;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training tensor (32-bit floats).
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check tensor (64-bit floats).
pub type Tensor64 = tensor::Tensor<f64>;
/// Default training graph.
pub type Graph32 = tensor::Graph<f32>;
/// Gradient-check graph.
pub type Graph64 = tensor::Graph<f64>;
/// Default model parameter set.
pub type ModelParams32 = model::ModelParams<f32>;
/// 64-bit model parameter set, for finite-difference verification.
pub type ModelParams64 = model::ModelParams<f64>;
