//! Tensor numeric core: dense tensors, the kernel suite, the reverse-mode
//! tape, and the finite-difference verification oracle.

mod conv;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{backward, backward_retain, Tape};
pub use tensor::Tensor;
