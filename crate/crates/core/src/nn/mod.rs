//! Minimal CPU layer library: channel-major feature maps, convolution,
//! transposed convolution, batch normalization, dense layers, activations
//! and first-order optimizers. Generic over `f32` and `f64`.

mod layers;
mod optim;
mod scalar;
mod tensor;

pub use layers::{
    softplus, Activation, ActivationLayer, BatchNorm, Conv2d, ConvGeometry, ConvTranspose2d,
    Linear, Param,
};
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::{matmul, Scalar};
pub use tensor::FeatureMap;
