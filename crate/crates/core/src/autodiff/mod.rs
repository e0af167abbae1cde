//! Tensor storage and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, Node};
pub use tensor::{matmul, Tensor};
