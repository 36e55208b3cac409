//! Unsupervised one-dimensional embedding of radio I/Q signals.
//!
//! A variational autoencoder encodes per-timestep feature vectors (raw I/Q,
//! lag differences, windowed lagged correlations) into a scalar latent and is
//! trained to predict the signal at several future lags. The latent trajectory
//! of a frame is summarized as a 2D histogram of `(z_t, z_{t+1} - z_t)`, which
//! serves as a modulation signature.

pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod io_stream;
pub mod seed;
pub mod signal_gen;
pub mod signature;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
