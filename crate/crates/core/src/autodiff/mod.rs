//! Minimal reverse-mode automatic differentiation for small dense models.

mod graph;
mod tensor;

pub use graph::{BackwardFn, BatchMoments, ConvGeometry, Graph, NormStats, Var};
pub use tensor::Tensor;
pub(crate) use tensor::matmul_raw;
