//! Dense tensors with a reverse-mode tape.
//!
//! [`Tensor`] is an immutable value; placing it on a [`Tape`] yields a [`Var`]
//! whose operations are recorded for [`Tape::backward`]. Kernels are generic
//! over [`Scalar`] so the same graph runs in 32-bit for training and 64-bit
//! for [`gradcheck`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, ParamStore, Params, Tape, Var};
pub use tensor::Tensor;
