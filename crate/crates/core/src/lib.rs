pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
