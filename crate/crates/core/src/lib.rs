//! Fingerprint denoising toolkit: a small CPU tensor core with hand-written
//! backward passes, a U-Net encoder-decoder, synthetic data generation,
//! training and image-quality metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training and
//! checkpoints use `f32`; gradient checks use `f64`.

pub mod checkpoint;
pub mod degrade;
pub mod error;
pub mod image;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{CheckpointError, Error, Result};
pub use image::GrayImage;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{UNetConfig, UNetParams};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type UNetParams32 = UNetParams<f32>;
pub type UNetParams64 = UNetParams<f64>;
