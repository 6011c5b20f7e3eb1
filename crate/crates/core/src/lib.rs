//! Desk-scale toolkit for fine-tuning embedding encoders under a drift
//! penalty that tethers them to a frozen pretrained reference.
//!
//! The pieces, bottom up:
//!
//! - [`matrix`], [`rng`]: dense f64 linear algebra and seeded randomness.
//! - [`gradcheck`]: a finite-difference oracle that validates every analytic
//!   gradient in the crate.
//! - [`encoder`]: the small feedforward vision encoder, its frozen snapshot,
//!   and the caption-embedding table standing in for a text encoder.
//! - [`losses`]: contrastive, symmetric contrastive, triplet, angular-margin
//!   and drift objectives with analytic gradients, plus the two composites.
//! - [`sampler`], [`synthdata`]: batch construction and seeded generators
//!   for multi-domain datasets with held-out classes.
//! - [`trainer`]: AdamW fine-tuning with linear learning-rate decay, and the
//!   self-supervised pretraining loop that produces the reference encoder.
//! - [`eval`]: retrieval, zero-shot accuracy, TAR@FAR verification, cluster
//!   variance and drift reports.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod textfmt;
pub mod trainer;

pub use error::{Error, Result};
