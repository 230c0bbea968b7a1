//! Dense-tensor arithmetic, reverse-mode gradients, and a finite-difference
//! gradient oracle.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
