//! Minimal reverse-mode automatic differentiation.
//!
//! Real tensors are dense row-major `f64` arrays. Complex tensors carry a
//! trailing axis of length 2 with `(re, im)` pairs, so every complex
//! operation reduces to real arithmetic and the whole substrate stays
//! real-valued. Broadcasting is limited to leading batch axes.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutodiffError, Result};
pub use graph::{CustomOp, Graph, Var, SINGULAR_CONDITION};
pub use params::{ParameterStore, CHECKPOINT_FORMAT, CHECKPOINT_MAGIC};
pub use tensor::Tensor;
