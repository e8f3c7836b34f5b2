//! Dense tensors and reverse-mode differentiation.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{
    set_gradient_perturbation, Gradients, Graph, LeafKind, NodeId, NORM_EPS, OP_NAMES,
};
pub use tensor::Tensor;
