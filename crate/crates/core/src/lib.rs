pub mod augmentation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
