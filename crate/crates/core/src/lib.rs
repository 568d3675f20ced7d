//! Speech-based severity estimation from articulatory coordination features
//! and self-supervised speech embeddings.
//!
//! The pipeline runs: 8-channel articulatory time series ([`datamodel`]) →
//! channel-delay correlation matrices ([`fvtc`]) → masked VQ-VAE concise
//! embeddings ([`vqvae`]) → two-branch CNN + attention fusion regressor
//! ([`fusion`]) → MAE / RMSE / Spearman reports ([`metrics`]). Everything
//! trains on the small autodiff engine in [`tensor`].

pub mod datamodel;
pub mod embeddings;
pub mod error;
pub mod fusion;
pub mod fvtc;
pub mod metrics;
pub mod seed;
pub mod tensor;
pub mod vqvae;

pub use error::{Error, FmatError, Result};
