//! Minimal reverse-mode automatic differentiation over dense matrices,
//! plus the optimizer primitives built on top of it.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, sgd_step};
pub use tape::{Mode, Tape, Var};
pub use tensor::{softmax_rows, Real, Tensor};

pub(crate) use tensor::{matmul_tb_into, real};
