//! Numerical core for diffusion dataset condensation.
//!
//! The pipeline scores every training sample by its expected denoising loss
//! under a reference model, selects a per-class subset at a fixed stride
//! through the difficulty ranking, attaches per-class text tokens and
//! per-sample visual tokens, and trains a conditional denoiser with an
//! auxiliary feature-alignment loss.
//!
//! This crate is `no_std` (with `alloc`). File formats, the experiment
//! harness and the command line live in the `d2c` crate.

#![no_std]

extern crate alloc;

pub mod attach;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod select;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Precision, Tensor, Var};
