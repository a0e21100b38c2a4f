//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable, cheaply clonable value. Differentiable
//! computation happens on [`Var`]s recorded on a [`Tape`]; a sweep with
//! [`Tape::backward`] yields [`Gradients`] for watched leaves and bound
//! parameters.

pub mod checkpoint;
mod element;
mod error;
pub mod mode;
mod ops;
mod optim;
mod params;
mod shape;
mod tape;
mod tensor;
#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use checkpoint::{AnyTensor, Checkpoint, IntoAny};
pub use element::{gemm, DType, Element, MatView};
pub use error::{Result, TensorError};
pub use ops::{bilinear_resize, bilinear_resize_tensor, broadcast_binary, concat, reduce_to_shape, softmax_attention};
pub use optim::{adamw_step, AdamState, AdamW};
pub use params::{Param, ParamId, ParamStore};
pub use shape::{broadcast_shapes, numel};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
