//! Compact convolutional network with exact backpropagation.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::Mode;
pub use model::{ConvStage, EncoderConfig, Model, ModelConfig, Output, ParamGroup, Trace};
pub use tensor::{Scalar, Tensor};
