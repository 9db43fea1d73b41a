//! Workbench for training a convolutional variational autoencoder on
//! salient-object scenes without count supervision and probing its latent
//! space for numerosity and cumulative-area codes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod cli;
pub mod error;
pub mod image;
pub mod nn;
pub mod perceptual;
pub mod probes;
pub mod scenegen;
pub mod seed;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
