//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, TensorCheck};
pub use graph::{Axis, Gradients, Graph, NodeId, PRIMITIVES};
pub use tensor::{argmax, max_value, Tensor};
