//! The denoising-network abstraction ε̂(z_t, t) with reverse-mode gradient
//! support, and two implementations: the Bayes-optimal analytic denoiser for
//! Gaussian-mixture priors ([`gmm::GmmDenoiser`]) and a small trainable MLP
//! ([`mlp::MlpDenoiser`]).

pub mod gmm;
pub mod mlp;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;
use crate::schedule::NoiseSchedule;

/// Predicts the standardized noise ε̂ in z_t = α_t·x + σ_t·ε.
pub trait Denoiser {
    /// Dimension of the signal space.
    fn dim(&self) -> usize;

    /// Noise prediction at state `z` and time `t`.
    fn eps_hat(&self, z: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Vector–Jacobian product: cotangentᵀ · ∂ε̂/∂z.
    fn eps_vjp(&self, z: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// One-step clean-signal prediction x̂ = (z − σ_t·ε̂)/α_t.
    fn x_hat(&self, schedule: &NoiseSchedule, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let (a, s) = schedule.alpha_sigma(t)?;
        let eps = self.eps_hat(z, t)?;
        Ok(z.iter().zip(&eps).map(|(zi, e)| (zi - s * e) / a).collect())
    }
}

/// Wrapper counting forward evaluations and VJP calls of an inner denoiser.
/// Counters are atomic so the wrapper can be shared across threads.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    forwards: AtomicU64,
    vjps: AtomicU64,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        CountingDenoiser {
            inner,
            forwards: AtomicU64::new(0),
            vjps: AtomicU64::new(0),
        }
    }

    /// Number of [`Denoiser::eps_hat`] evaluations so far.
    pub fn forwards(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Number of [`Denoiser::eps_vjp`] evaluations so far.
    pub fn vjps(&self) -> u64 {
        self.vjps.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.vjps.store(0, Ordering::Relaxed);
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eps_hat(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.eps_hat(z, t)
    }

    fn eps_vjp(&self, z: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.vjps.fetch_add(1, Ordering::Relaxed);
        self.inner.eps_vjp(z, t, cotangent)
    }
}
