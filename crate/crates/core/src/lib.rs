//! Self-distillation with shifted negative views for unsupervised
//! out-of-distribution detection.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod negatives;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
