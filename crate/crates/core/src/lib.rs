//! Cross-image relational knowledge distillation for dense prediction.

pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod memory;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod trainer;

pub use error::{CirkdError, Result};
pub use matrix::{DenseMatrix, FeatureMap, LabelMap, LogitMap, DEFAULT_IGNORE};
