//! Dense tensors, differentiable primitives, reverse-mode gradients and Adam.

mod adam;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use real::{gemm, MatRef, Real};
pub use tape::{BatchStats, BnAxes, BnMode, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
