//! Differentiable operations on [`Var`](crate::Var).
//!
//! Every op validates shapes, computes its output eagerly, applies the
//! checked-mode finiteness test and, when any operand is differentiable,
//! records a backward rule on the tape.

mod attention;
mod binary;
mod layout;
mod matmul;
mod norm;
mod reduce;
mod resize;
mod unary;

pub use attention::softmax_attention;
pub use binary::{broadcast_binary, reduce_to_shape};
pub use layout::concat;
pub use resize::{bilinear_resize, bilinear_resize_tensor};
