//! Dense `f64` tensors with reverse-mode differentiation and the layer
//! primitives of a 3D segmentation network.

mod conv;
pub mod gradcheck;
mod ops;
mod tensor;

pub use conv::{conv3d, conv_transpose3d, ConvGeometry};
pub use ops::{
    add, channel_softmax, concat_channels, dense, global_avg_pool3d, leaky_relu, max_pool3d, mul,
    mul_scalar, scale_channels, sigmoid, sigmoid_scalar, sum,
};
pub use tensor::{no_grad, numel, BackwardCtx, BackwardFn, Tensor};

/// Negative slope used when none is configured.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
