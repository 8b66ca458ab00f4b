//! Flow encoder with a selective state-space backbone, its two training
//! stages and the evaluation metrics.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod train;

pub use error::{ModelError, Result};
