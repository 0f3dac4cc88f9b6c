pub mod data;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
