//! Dense tensors, reverse-mode differentiation, the optimizer, and a
//! finite-difference oracle.

pub mod fd;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use fd::{finite_difference_grad, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use optim::{optimizer_step, OptimizerState};
pub use tensor::{gelu, log_sum_exp, Tensor};
