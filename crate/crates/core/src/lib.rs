//! Personalized open-vocabulary segmentation head.

pub mod cli;
pub mod error;
pub mod grad;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod personalize;
pub mod snapshot;
pub mod synthbench;
pub mod tensor;

pub use error::{Error, Result};
