//! Texture-aware lesion segmentation: a small reverse-mode tensor engine,
//! the statistical counting operator, attention blocks, a U-shaped network,
//! and the training, data and evaluation plumbing around it.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod ksco;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stet;
pub mod stft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{DType, Real, Tape, Tensor, Var};
pub use train::TrainConfig;
