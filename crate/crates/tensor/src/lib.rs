//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine records every operation on a [`Graph`] tape as it is evaluated
//! eagerly; [`Graph::backward`] then walks the tape in reverse topological
//! order. The primitive set is deliberately small: 2-D (transposed)
//! convolution, GDN/IGDN, elementwise arithmetic, a handful of unary
//! functions, reductions, average pooling, reflection padding and channel
//! slicing. Anything else can be plugged in through [`Function`].
//!
//! All kernels are generic over [`Scalar`] so that the same code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod conv;
mod error;
mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use conv::{conv2d_forward, conv2d_transpose_forward, conv_output_size, conv_transpose_output_size};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Function, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tensor::Tensor;
