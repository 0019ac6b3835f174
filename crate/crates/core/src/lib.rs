pub mod allocation;
pub mod cli;
pub mod diversity;
pub mod error;
pub mod eval;
pub mod model;
pub mod pruner;
pub mod selection;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
