//! Hourglass: a hierarchical autoregressive Transformer that shortens the
//! sequence of activations in its middle layers and upsamples it back,
//! together with the tooling needed to train it on byte corpora, audit it
//! for autoregressive leaks and estimate its compute cost.

pub mod audit;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod resample;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Deterministic generator used for initialisation, dropout and sampling.
pub type Rng = rand_chacha::ChaCha8Rng;
