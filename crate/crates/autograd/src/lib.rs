//! Reverse-mode automatic differentiation over dense `NCHW` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//!
//! The op set covers what the watermarking encoder,
//! decoder, discriminator and differentiable distortion layers need, and every
//! op is generic over [`Real`] so the same graphs can be evaluated in `f32`
//! for training and in `f64` for finite-difference checks.

mod adam;
mod error;
pub mod ops;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
