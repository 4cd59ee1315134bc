pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod editing;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod service;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
