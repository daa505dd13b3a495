//! Wave-U-Net discriminator for GAN vocoders.
//!
//! The crate bundles a small reverse-mode autodiff engine over
//! `[batch, channels, time]` tensors ([`graph`], [`kernels`]), log-mel
//! features and audio I/O ([`signal`]), the sample-wise Wave-U-Net
//! discriminator ([`disc`]), a forward-only multi-period/multi-scale
//! ensemble for size and speed comparisons ([`ensemble`]), least-squares
//! GAN and feature-matching losses ([`losses`]), a toy mel-to-waveform
//! generator ([`generator`]) and the training harness ([`train`]).

pub mod disc;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod losses;
pub mod generator;
pub mod gradcheck;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor3};
