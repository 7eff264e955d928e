//! Autoregressive diffusion over latent token sequences.
//!
//! A sequence is split into AR steps. One attention mask lets every noisy
//! step see the condition and the clean tokens of earlier steps, so all
//! steps are denoised in a single forward pass during training.

pub mod arplan;
pub mod causal_mask;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
