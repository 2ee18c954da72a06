//! Numerical toolkit for latent-space disguises against a fixed convolutional
//! autoencoder, and for detecting them.
//!
//! A disguise is an image that stays visually close to an innocuous base
//! image while its encoder features match a hidden target image. The crate
//! provides the optimization that crafts such images, the perceptual and
//! latent distance measures it minimizes, a small trainable autoencoder to
//! stand in for a production encoder/decoder pair, and the audit side:
//! latent similarity screening and reconstruction-loss examination.
//!
//! Batch-level work (training batches, dataset screening, fixture synthesis)
//! runs data-parallel through rayon when the default `parallel` feature is
//! enabled, and falls back to sequential loops without it. Results are
//! bit-identical either way: per-item work is independent and reductions
//! happen in a fixed order after an ordered collect.

pub mod audit;
pub mod codec;
pub mod diffcore;
pub mod distances;
pub mod error;
pub mod fixtures;
pub mod forge;
pub mod par;
pub mod png;

pub use error::{Error, Result};
