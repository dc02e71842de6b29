//! Learned image codec with frequency-band-aware attention blocks, a
//! channel-wise autoregressive entropy model and a latent diffusion decoder.
//!
//! Everything is generic over the scalar type; the aliases below fix it to `f32`.

pub mod autograd;
pub mod codec;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod ffab;
pub mod layers;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod prior;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use codec::{compress, decompress, DecodeOptions};
pub use error::{Error, Result};
pub use model::ModelConfig;
pub use scalar::{DType, Scalar};
pub use tensor::{ComplexTensor, Tensor};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = model::Model<f32>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type Dataset32 = training::Dataset<f32>;
