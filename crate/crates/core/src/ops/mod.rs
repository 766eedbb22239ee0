//! Differentiable numeric kernels.
//!
//! Every forward kernel has a matching `*_backward` that returns the exact
//! vector-Jacobian product for an upstream gradient. All kernels are pure
//! and run sequentially, so results are bitwise reproducible.

mod conv;
mod elementwise;
mod pool;
mod resize;

pub use conv::{
    conv3d_depthwise, conv3d_depthwise_backward, conv3d_pointwise, conv3d_pointwise_backward,
    DepthwiseGrads, PointwiseGrads,
};
pub(crate) use elementwise::sign0 as elementwise_sign;
pub use elementwise::{
    abs, abs_backward, add, add_backward, concat_channels, mul, mul_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, split_channels, square, square_backward, tanh, tanh_backward,
};
pub use pool::{avg_pool3d, avg_pool3d_backward, pooled_extent};
pub use resize::{trilinear_resize, trilinear_resize_backward};
