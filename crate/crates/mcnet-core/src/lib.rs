//! Measurement-consistent super-resolution built around an implicit ADMM layer.
//!
//! The pipeline wraps the output `w` of any super-resolution backbone in a
//! fixed-point layer that solves a constrained restoration problem: the output
//! is pinned to the measurement set `{x : ||b - Ax|| <= eps}` while a shallow
//! learnable denoiser supplies the image prior. The layer is trained end to
//! end through implicit differentiation, so the forward solver can run as many
//! iterations as it needs without growing the backward pass.
//!
//! Modules follow the data flow:
//! - [`tensor`]: dense image tensors and convolution primitives with exact adjoints
//! - [`color`] / [`metrics`] / [`io`]: Y-channel conversion, PSNR/SSIM, PNG/PGM files
//! - [`measurement`]: downsampling operators `A` and projections onto the feasible set
//! - [`denoiser`]: the bias-free CNN prior with hand-rolled VJPs and spectral normalization
//! - [`fixedpoint`]: Picard and Anderson-accelerated fixed-point solvers
//! - [`layer`]: the implicit layer (forward solve, implicit backward pass, PnP baseline)
//! - [`training`] / [`dataset`]: Adam training of the denoiser and trade-off weight
//! - [`evaluate`]: PSNR/SSIM/data-fidelity tables over prepared datasets
//! - [`config`]: the key-value run configuration shared with the CLI

pub mod color;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod evaluate;
pub mod fixedpoint;
pub mod io;
pub mod layer;
pub mod measurement;
pub mod metrics;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete aliases for the common single-precision pipeline.
pub type ImageF32 = tensor::ImageTensor<f32>;
/// Concrete aliases for the double-precision pipeline used by the CLI and tests.
pub type ImageF64 = tensor::ImageTensor<f64>;
pub type KernelF32 = tensor::ConvKernel2D<f32>;
pub type KernelF64 = tensor::ConvKernel2D<f64>;
pub type MeasurementF64 = measurement::MeasurementModel<f64>;
pub type DenoiserF64 = denoiser::DenoiserParams<f64>;
