//! Single-image dehazing with AOD-Net built from scratch.
//!
//! The crate bundles everything needed to train and validate the model at
//! desk scale: a small tensor library with reverse-mode gradients
//! ([`tensor`]), haze synthesis from depth maps ([`haze`]), the network
//! itself ([`model`]), the training loop ([`train`]), PSNR/SSIM and the
//! mean/residual MSE decomposition ([`metrics`]), a dark channel prior
//! baseline ([`dcp`]), PNG and manifest I/O ([`io`]), and the command-line
//! front end ([`cli`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dcp;
pub mod error;
pub mod gradcheck;
pub mod haze;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod oracle;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};
