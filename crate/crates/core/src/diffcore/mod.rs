//! Reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use params::{randn, uniform, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{softmax_row, topk_indices};
