//! Dense `f64` tensors, a reverse-mode tape, and the optimizer and
//! regularizer primitives used to train the waveform GAN.

mod error;
mod gradcheck;
mod graph;
mod init;
mod kernels;
mod params;
mod rng;
mod spectral;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, Var};
pub use init::orthogonal_init;
pub use params::{adam_step, ema_update, AdamConfig, Param, ParamGrads, ParamStore};
pub use rng::Rng;
pub use spectral::{estimate_sigma, sigma_from, spectral_normalize};
pub use tensor::Tensor;
