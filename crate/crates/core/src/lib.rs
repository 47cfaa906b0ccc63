pub mod autograd;
pub mod datasets;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod video;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision parameters, used for training and inference.
pub type Params32 = model::ModelParams<f32>;
/// Double-precision parameters, used for gradient checking.
pub type Params64 = model::ModelParams<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Checkpoint32 = training::Checkpoint<f32>;
