//! Dense tensors, define-by-run reverse-mode differentiation, AdamW and a
//! finite-difference gradient checker.

mod graph;
mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use graph::{CostTag, Gradients, Graph, OpCounters, Var};
pub(crate) use graph::softmax_in_place;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamReport};
pub use optim::{AdamW, AdamWConfig, Moments};
pub use params::{Bound, ParamStore};
pub(crate) use tensor::gemm;
pub use tensor::{matmul, Real, Tensor};
