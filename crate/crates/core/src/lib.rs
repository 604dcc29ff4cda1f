//! Deep-weight-prior knowledge transfer for volumetric semantic segmentation.
//!
//! The pipeline has three stages: train a 3D U-Net on a source domain while
//! harvesting its 3x3x3 convolution kernels, fit a small VAE to the harvested
//! kernels as an implicit prior over filters, then train a target-domain model
//! by stochastic variational inference under that prior. The [`experiments`]
//! module benchmarks this against fine-tuning and random-init baselines.

pub mod checkpoint;
pub mod data;
pub mod dwp;
pub mod error;
pub mod experiments;
pub mod harvest;
pub mod numerics;
pub mod segnet;
pub mod vi;

pub use error::{Error, Result};
pub use numerics::real::Real;
pub use numerics::tensor::Tensor;
pub use segnet::params::ParamSet;
