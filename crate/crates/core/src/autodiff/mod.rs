//! Tape-based reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor).
//!
//! Ops are methods on [`Graph`]; each records a closure that maps the output
//! cotangent to parent cotangents. Layouts are channels-last throughout.

mod conv;
mod elementwise;
mod graph;
mod linalg;
mod shape;

pub use elementwise::{gelu, gelu_grad, sigmoid, silu, silu_grad};
pub use graph::{Gradients, Graph, Var};
pub use shape::{pad_tensor, reflect_index, PadMode};
