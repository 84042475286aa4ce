//! Image transmission over a simulated AWGN channel with a learned
//! joint source-channel code, plus two diffusion-based receivers that
//! restore perceptual quality from the decoder output:
//!
//! - [`sing_zero`]: null-space diffusion sampling under a linear
//!   degradation model.
//! - [`sing_inn`]: the same sampler steered by a conditional invertible
//!   network that models the nonlinear channel degradation.
//!
//! Tensors are NCHW; images live in `[0, 1]`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod checkpoint;
pub mod cond_inn;
pub mod deepjscc;
pub mod degradation;
pub mod diffusion;
pub mod harness;
pub mod metrics;
mod error;
pub mod nn;
pub mod rng;
pub mod sing_inn;
pub mod sing_zero;

pub use error::{Error, Result};
