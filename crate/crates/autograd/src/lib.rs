//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The crate provides exactly the operator set needed by small
//! convolutional image-to-image generators and patch discriminators:
//! elementwise arithmetic, matrix products, strided 2-D convolution and
//! transposed convolution, instance normalization, the usual activations,
//! pooling and reductions. Everything is generic over [`Float`] so the
//! same graph can be trained in `f32` and gradient-checked in `f64`.
//!
//! ```
//! use layergan_autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! # Features
//!
//! - `parallel` *(default)*: batch-level parallelism in the convolution
//!   kernels and the helpers in [`par`] via rayon. Reductions always run in
//!   a fixed order, so results are bitwise identical with and without it.

mod adam;
mod error;
mod gradcheck;
mod kernels;
pub mod par;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckError};
pub use kernels::{conv_out_size, conv_transpose_out_size};
pub use param::{ParamId, ParamStore};
pub use scalar::Float;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
