pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod peft;
pub mod report;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
