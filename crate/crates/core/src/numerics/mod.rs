//! Dense `f64` tensors and the reverse-mode tape used by every loss and attack.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{euclidean, l2_norm, softmax_rows, Tensor};
pub(crate) use tensor::{matmul_raw, transpose_raw};

#[cfg(test)]
pub(crate) mod gradcheck;
