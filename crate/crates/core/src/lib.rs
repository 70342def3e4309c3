//! Dual sequence-to-sequence vision-and-language training at desk scale.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corruption;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{DuVlgModel, ModelConfig};
pub use scalar::Scalar;

/// The 64-bit tensor every model component computes with.
pub type Tensor = autodiff::Tensor<f64>;
/// Single-precision tensor; the engine and optimizer accept it too.
pub type Tensor32 = autodiff::Tensor<f32>;

/// Index into a token vocabulary.
pub type TokenId = usize;
