pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cycles;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod plot;
pub mod segsem;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
