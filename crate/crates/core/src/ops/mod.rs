//! Layer operations with forward and backward passes.
//!
//! All ops are pure functions of their inputs and deterministic.

mod activation;
mod concat;
mod conv;
pub mod gradcheck;
mod loss;
mod pool;
mod upconv;

pub use activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use loss::mae_loss;
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, PoolIndices};
pub use upconv::{transposed_conv2x2_backward, transposed_conv2x2_forward, UpconvGrads};
