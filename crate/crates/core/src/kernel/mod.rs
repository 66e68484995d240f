//! Dense tensors, a recording graph with reverse-mode differentiation, the
//! AdamW update and a finite-difference gradient checker.

mod adamw;
mod conv;
mod gradcheck;
mod graph;
mod interp;
mod pool;
mod scalar;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Broadcast, Graph, PoolKind, ReduceKind, Var};
pub use interp::bilinear_source;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
