pub mod densenet;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{concat_channels, finite_difference_gradient, split_channels, Axis, Reduction, Shape, Tensor};
