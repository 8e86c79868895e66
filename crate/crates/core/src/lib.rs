//! Variational posterior inference for inverse problems under diffusion
//! priors, verified against exactly solvable Gaussian-mixture test beds.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod metrics;
pub mod operators;
pub mod plot;
pub mod optim;
pub mod rng;
pub mod sampleio;
pub mod schedule;
pub mod vipaint;
pub(crate) mod util;

pub use error::{Error, Result};
