pub mod cli;
pub mod codebook;
pub mod config;
pub mod container;
pub mod distill;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod student;
pub mod synthdata;
pub mod teacher;

pub use error::{Error, Result};
pub use numerics::Tensor;
