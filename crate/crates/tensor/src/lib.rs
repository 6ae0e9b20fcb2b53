//! Dense CPU tensors with a tape-based reverse-mode autodiff graph.
//!
//! The op set is deliberately narrow: it covers exactly what the counting
//! network needs (strided convolutions, batch norm, channel pooling,
//! nearest upsampling, row softmax, matrix products and a few pointwise ops).

pub mod check;
mod elem;
mod graph;
mod tensor;

pub use elem::{gemm, Elem};
pub use graph::{BnMode, BnStats, Grads, Graph, Var, BN_EPS, LOGIT_CLAMP};
pub use tensor::Tensor;
