//! Dual-perspective cropping and enhancement for high-resolution images.
//!
//! A high-resolution image is cropped twice — into contiguous local tiles and
//! into stride-interleaved global samplings — encoded sub-image by sub-image
//! with a pluggable encoder, recombined into high-resolution feature grids,
//! cross-attention enhanced in both directions, fused, and average-pooled
//! back to a fixed visual-token budget.
//!
//! Modules:
//! - [`geometry`]: grids, crops, exact inverse recombinations, pixel maps.
//! - [`tensor`]: the dense-tensor kernels (double precision, deterministic).
//! - [`autodiff`]: reverse-mode tape and central-difference gradient checks.
//! - [`encoder`]: the vision-encoder contract and the toy patch-embed stub.
//! - [`dem`]: paired cross-attention, fusion variants, pooling.
//! - [`pipeline`]: the end-to-end visual path plus token/FLOP budgeting.
//! - [`naive`], [`selftest`]: independent oracles and the verification suites.

pub mod autodiff;
pub mod dem;
pub mod encoder;
mod error;
pub mod geometry;
pub mod naive;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
