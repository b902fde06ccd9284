//! Creative decoding for variational autoencoders.
//!
//! Trains small dense VAEs and classifiers, profiles the decoder's neuron
//! activation statistics, generates samples with neuron-flipping decoding
//! interventions, and scores their novelty.

pub mod adam;
pub mod atlas;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generate;
pub mod intervention;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod store;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
