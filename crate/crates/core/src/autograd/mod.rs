//! Dense `f64` arrays with define-by-run reverse-mode differentiation.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
