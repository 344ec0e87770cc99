//! Multi-resolution CNN training with two label-disambiguation techniques:
//! merging classes that the confusion matrix shows to be ambiguous, and
//! multi-task training against soft labels from a separate knowledge network.

pub mod config;
pub mod data;
pub mod disambig;
pub mod error;
pub mod eval;
pub mod io;
pub mod multires;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
