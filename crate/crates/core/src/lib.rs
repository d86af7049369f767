//! Adversarial raw-waveform speech synthesis: a conditional convolutional
//! generator trained against ensembles of random window discriminators,
//! with Fréchet and kernel distances on surrogate spectral features.

pub mod analysis;
pub mod audio;
pub mod blocks;
pub mod data;
pub mod distances;
pub mod error;
pub mod generator;
pub mod rwd;
pub mod train;

pub use error::{CoreError, Result};
