//! Minimal reverse-mode differentiation over `f64` tensors, sized for the
//! small convolutional networks used here.

mod graph;
mod tensor;

pub use graph::{log_sum_exp, softmax, Grads, Graph, Var};
pub use tensor::{ParamSet, Tensor};
