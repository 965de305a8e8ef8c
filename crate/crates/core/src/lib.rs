//! Mask-based MVDR beamforming for moving sources with learned,
//! attention-weighted spatial covariance estimation.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod mask;
pub mod mvdr;
pub mod pipeline;
pub mod scm;
pub mod scene;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
