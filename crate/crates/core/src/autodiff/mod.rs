//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! The engine supports exactly the primitives the recurrent graph models
//! need: matrix products (plain and batch-stacked), element-wise arithmetic,
//! `sigmoid`/`tanh`/`relu`, concatenation, slicing, reshaping and a mean
//! squared error reduction. There is no general broadcasting; the only
//! broadcast is [`Tape::add_bias`] along the last axis.
//!
//! Values are `f64` throughout. Debug builds verify every op output is
//! finite; release builds check only at the loss.

mod check;
mod tape;
mod tensor;

pub use check::{check_gradients, finite_difference_check};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


