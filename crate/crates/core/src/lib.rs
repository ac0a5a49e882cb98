//! Padded auto-encoder (PAE) for multichannel reactor-transient monitoring
//! windows.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`numerics`]: dense `f64` tensors with a tape-based reverse-mode engine
//!   and a finite-difference gradient checker.
//! - [`datagen`]: a deterministic synthetic loss-of-coolant transient
//!   generator (38 channels × 200 samples, cold/hot leg breaks).
//! - [`corruption`]: per-channel SNR noise and patch-level zero masking.
//! - [`model`]: patchify, transformer encoder, reverse LSTM compression to a
//!   latent, and the symmetric decoder, plus a binary checkpoint format.
//! - [`training`]: Nesterov-Adam and the curriculum training loop.
//! - [`diagnosis`]: break-location / break-size heads, baselines and metrics.
//! - [`manifold`]: exact t-SNE and neighbourhood purity.
//! - [`experiment`]: dataset-level corrupted views, latents and
//!   reconstruction scores.

pub mod corruption;
pub mod datagen;
pub mod diagnosis;
pub mod error;
pub mod experiment;
pub mod manifold;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{PaeError, Result};
