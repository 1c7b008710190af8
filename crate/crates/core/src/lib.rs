//! Situation recognition heads trained on frozen image and text embeddings.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient checks); the aliases below pin the common choices.

pub mod data;
pub mod error;
pub mod heads;
pub mod kernel;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod train;

pub use error::{Result, SituError};
pub use scalar::Scalar;

pub type Tensor32 = kernel::Tensor<f32>;
pub type Tensor64 = kernel::Tensor<f64>;
pub type Tape32 = kernel::Tape<f32>;
pub type Tape64 = kernel::Tape<f64>;
pub type Model32 = heads::Model<f32>;
pub type Model64 = heads::Model<f64>;
