//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The engine records a graph of [`Var`] nodes while values are computed and
//! replays it backwards on demand. Only the operations needed by
//! convolutional generators and discriminators are provided: broadcasting
//! arithmetic, pointwise activations, reductions, reshapes, convolutions,
//! dense layers and instance normalization.

extern crate blas_src;

mod conv;
mod ops;
mod optim;
mod param;
mod scalar;
mod var;

pub use conv::ConvGeometry;
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use param::Parameter;
pub use scalar::Scalar;
pub use var::{Gradients, Var};

pub use ndarray;
