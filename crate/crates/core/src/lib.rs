pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
