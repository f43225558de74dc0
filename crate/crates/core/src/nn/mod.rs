//! Feedforward primitives, each paired with its backward pass.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{relu, relu_backward, sigmoid, softmax, softmax_row};
pub use conv::{conv2d, conv2d_backward, out_extent, ConvGrads, ConvParams};
pub use linear::{linear, linear_backward, LinearGrads, LinearParams};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_cached, BatchNormCache, BatchNormGrads, BatchNormParams, Mode,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward,
    upsample_nearest, upsample_nearest_backward, Pool2d,
};
