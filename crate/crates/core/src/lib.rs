pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};
