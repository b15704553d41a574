//! Dense tensors with a reverse-mode gradient tape.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_many};
pub use graph::{bce_with_logits_value, Gradients, Graph, Var};
pub use tensor::{matmul, Tensor};

pub(crate) use graph::softmax_row;
