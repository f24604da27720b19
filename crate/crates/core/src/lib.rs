//! Label rectification for long-tailed, noisily labeled data by class-adaptive
//! consensus of several experts.

pub mod consensus;
pub mod error;
pub mod experts;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
pub use types::{ClassCounts, ConfidenceMatrix, ConfidenceVector, Dataset, FrequencyMatrix, Matrix, RectifiedState};
