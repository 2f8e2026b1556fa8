//! Dual-encoder prompt scheduling at desk scale.
//!
//! This crate implements a small text+vision transformer pair in the CLIP
//! style, together with per-layer *prompt operations* on the vision branch:
//! inserting continuous prompts at a layer's input, removing some of them
//! from the layer's output, and carrying the survivors forward to the next
//! layer. A per-layer affine coupling maps text-branch prompts to
//! vision-branch prompts, and a few-shot harness trains the prompt and
//! coupling parameters against a frozen, seeded backbone.
//!
//! Everything is built on a minimal reverse-mode autodiff tensor
//! ([`tensor::Tensor`]) using 64-bit floats, so gradients can be verified
//! against central finite differences.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, and the CLI live
//! in the companion `promptlab-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod clip;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::Tensor;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Crate version, echoed into reports by downstream tooling.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
