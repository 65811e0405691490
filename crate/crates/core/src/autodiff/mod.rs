//! Minimal deterministic reverse-mode automatic differentiation over `f64`
//! tensors, with just the operations the policy network needs.

mod adam;
mod graph;
mod linalg;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub(crate) use graph::softmax_in_place;
pub use graph::{upsample_map, Gradients, Graph, TapeEntry, Var};
pub use tensor::Tensor;
