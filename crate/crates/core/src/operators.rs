//! Linear measurement models and their observation log-likelihoods.
//!
//! A measurement is y = f(x) + v where f is one of three linear maps
//! (coordinate masking, Gaussian blur with zero padding, block-average
//! downsampling) and v is simulated as Gaussian noise of std `sigma_v`.
//! Inference methods may score observations under either a Gaussian density
//! (matching the simulator) or a heavier-tailed Laplace density.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_len, Error, Result};
use crate::rng;
use crate::util::LN_2PI;

/// The noiseless linear part of a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinearOp {
    /// Keep the coordinates flagged true, in order.
    Mask { mask: Vec<bool> },
    /// Same-size 1-D convolution with a normalized Gaussian kernel,
    /// zero-padded at the boundary.
    GaussianBlur { kernel: Vec<f64> },
    /// Non-overlapping block averages; input length must be divisible.
    Downsample { factor: usize },
}

impl LinearOp {
    pub fn mask(mask: Vec<bool>) -> Result<Self> {
        ensure!(
            mask.iter().any(|&b| b),
            "mask must observe at least one coordinate"
        );
        Ok(LinearOp::Mask { mask })
    }

    /// Normalized Gaussian kernel of odd length `len` and width `std`.
    pub fn gaussian_blur(len: usize, std: f64) -> Result<Self> {
        ensure!(len % 2 == 1, "kernel length must be odd, got {len}");
        ensure!(std > 0.0, "kernel std must be positive, got {std}");
        let half = (len / 2) as isize;
        let mut kernel: Vec<f64> = (-half..=half)
            .map(|i| (-0.5 * (i as f64 / std).powi(2)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        Ok(LinearOp::GaussianBlur { kernel })
    }

    pub fn downsample(factor: usize) -> Result<Self> {
        ensure!(factor >= 2, "downsample factor must be ≥ 2, got {factor}");
        Ok(LinearOp::Downsample { factor })
    }

    /// Output dimension for inputs of length `in_dim`.
    pub fn obs_dim(&self, in_dim: usize) -> Result<usize> {
        match self {
            LinearOp::Mask { mask } => {
                ensure_len!("mask", mask.len(), in_dim);
                Ok(mask.iter().filter(|&&b| b).count())
            }
            LinearOp::GaussianBlur { .. } => Ok(in_dim),
            LinearOp::Downsample { factor } => {
                ensure!(
                    in_dim % factor == 0,
                    "input length {in_dim} not divisible by downsample factor {factor}"
                );
                Ok(in_dim / factor)
            }
        }
    }

    /// The noiseless forward map.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            LinearOp::Mask { mask } => {
                ensure_len!("mask input", mask.len(), x.len());
                Ok(x.iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| *v)
                    .collect())
            }
            LinearOp::GaussianBlur { kernel } => {
                let half = (kernel.len() / 2) as isize;
                Ok((0..x.len() as isize)
                    .map(|i| {
                        kernel
                            .iter()
                            .enumerate()
                            .map(|(j, k)| {
                                let src = i + j as isize - half;
                                if src >= 0 && (src as usize) < x.len() {
                                    k * x[src as usize]
                                } else {
                                    0.0
                                }
                            })
                            .sum()
                    })
                    .collect())
            }
            LinearOp::Downsample { factor } => {
                let out = self.obs_dim(x.len())?;
                Ok((0..out)
                    .map(|i| {
                        x[i * factor..(i + 1) * factor].iter().sum::<f64>() / *factor as f64
                    })
                    .collect())
            }
        }
    }

    /// Transpose map: ⟨f(x), u⟩ = ⟨x, adjoint(u)⟩ for all x, u.
    pub fn adjoint(&self, u: &[f64], in_dim: usize) -> Result<Vec<f64>> {
        ensure_len!("adjoint input", self.obs_dim(in_dim)?, u.len());
        match self {
            LinearOp::Mask { mask } => {
                let mut out = vec![0.0; in_dim];
                let mut j = 0;
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        out[i] = u[j];
                        j += 1;
                    }
                }
                Ok(out)
            }
            LinearOp::GaussianBlur { kernel } => {
                let half = (kernel.len() / 2) as isize;
                let mut out = vec![0.0; in_dim];
                for (i, &ui) in u.iter().enumerate() {
                    for (j, &k) in kernel.iter().enumerate() {
                        let src = i as isize + j as isize - half;
                        if src >= 0 && (src as usize) < in_dim {
                            out[src as usize] += k * ui;
                        }
                    }
                }
                Ok(out)
            }
            LinearOp::Downsample { factor } => {
                let mut out = vec![0.0; in_dim];
                for (i, &ui) in u.iter().enumerate() {
                    for j in 0..*factor {
                        out[i * factor + j] = ui / *factor as f64;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Density used to score observations during inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsModel {
    Gaussian,
    Laplace,
}

/// A full measurement model: linear map, simulation noise level, and the
/// observation density used by inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOp {
    pub linear: LinearOp,
    /// Noise std used when simulating y = f(x) + v; zero means noiseless.
    pub sigma_v: f64,
    pub obs_model: ObsModel,
    /// Scale b of the Laplace density; unused under the Gaussian model.
    pub laplace_scale: f64,
}

impl MeasurementOp {
    pub fn new(
        linear: LinearOp,
        sigma_v: f64,
        obs_model: ObsModel,
        laplace_scale: f64,
    ) -> Result<Self> {
        ensure!(
            sigma_v.is_finite() && sigma_v >= 0.0,
            "sigma_v must be finite and nonnegative, got {sigma_v}"
        );
        if obs_model == ObsModel::Gaussian {
            ensure!(
                sigma_v > 0.0,
                "gaussian observation model needs sigma_v > 0"
            );
        }
        if obs_model == ObsModel::Laplace {
            ensure!(
                laplace_scale > 0.0,
                "laplace scale must be positive, got {laplace_scale}"
            );
        }
        Ok(MeasurementOp {
            linear,
            sigma_v,
            obs_model,
            laplace_scale,
        })
    }

    pub fn gaussian(linear: LinearOp, sigma_v: f64) -> Result<Self> {
        Self::new(linear, sigma_v, ObsModel::Gaussian, 1.0)
    }

    pub fn obs_dim(&self, in_dim: usize) -> Result<usize> {
        self.linear.obs_dim(in_dim)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.linear.apply(x)
    }

    pub fn adjoint(&self, u: &[f64], in_dim: usize) -> Result<Vec<f64>> {
        self.linear.adjoint(u, in_dim)
    }

    /// Simulate an observation of ground truth `x` with fresh Gaussian noise.
    pub fn observe<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut y = self.apply(x)?;
        if self.sigma_v > 0.0 {
            let noise = rng::normal_vec(rng, y.len());
            for (yi, ni) in y.iter_mut().zip(noise) {
                *yi += self.sigma_v * ni;
            }
        }
        Ok(y)
    }

    /// Normalized log density of `y` given clean signal `x` under the
    /// configured observation model.
    pub fn log_likelihood(&self, y: &[f64], x: &[f64]) -> Result<f64> {
        let fx = self.apply(x)?;
        ensure_len!("observation", fx.len(), y.len());
        let m = y.len() as f64;
        match self.obs_model {
            ObsModel::Gaussian => {
                let sq: f64 = y
                    .iter()
                    .zip(&fx)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let v = self.sigma_v * self.sigma_v;
                Ok(-sq / (2.0 * v) - 0.5 * m * (v.ln() + LN_2PI))
            }
            ObsModel::Laplace => {
                let l1: f64 = y.iter().zip(&fx).map(|(a, b)| (a - b).abs()).sum();
                Ok(-l1 / self.laplace_scale - m * (2.0 * self.laplace_scale).ln())
            }
        }
    }

    /// Gradient of [`log_likelihood`](Self::log_likelihood) with respect to x.
    pub fn log_likelihood_grad(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let fx = self.apply(x)?;
        ensure_len!("observation", fx.len(), y.len());
        let resid: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        match self.obs_model {
            ObsModel::Gaussian => {
                let v = self.sigma_v * self.sigma_v;
                let up: Vec<f64> = resid.iter().map(|r| r / v).collect();
                self.adjoint(&up, x.len())
            }
            ObsModel::Laplace => {
                let up: Vec<f64> = resid
                    .iter()
                    .map(|r| r.signum() / self.laplace_scale)
                    .collect();
                self.adjoint(&up, x.len())
            }
        }
    }

    /// Gradient of the squared residual ‖y − f(x)‖² with respect to x.
    pub fn sq_residual_grad(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let fx = self.apply(x)?;
        ensure_len!("observation", fx.len(), y.len());
        let up: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| -2.0 * (a - b)).collect();
        self.adjoint(&up, x.len())
    }
}

/// Lift an observation to a full-dimensional signal, for initializing
/// inference. Masked entries are filled with the mean of the observed
/// entries; for blur and downsample operators the minimum-norm preimage
/// Aᵀ(AAᵀ)⁻¹y is used, which maps back to y exactly under the operator.
pub fn fill_observation(op: &MeasurementOp, y: &[f64], dim: usize) -> Result<Vec<f64>> {
    ensure_len!("observation", op.obs_dim(dim)?, y.len());
    match &op.linear {
        LinearOp::Mask { mask } => {
            let fill = if y.is_empty() {
                0.0
            } else {
                y.iter().sum::<f64>() / y.len() as f64
            };
            let mut out = vec![fill; dim];
            let mut k = 0;
            for (i, &keep) in mask.iter().enumerate() {
                if keep {
                    out[i] = y[k];
                    k += 1;
                }
            }
            Ok(out)
        }
        _ => {
            let m = y.len();
            let mut a = DMatrix::zeros(m, dim);
            for j in 0..dim {
                let mut basis = vec![0.0; dim];
                basis[j] = 1.0;
                let col = op.apply(&basis)?;
                for i in 0..m {
                    a[(i, j)] = col[i];
                }
            }
            let gram = &a * a.transpose();
            let y_v = DVector::from_column_slice(y);
            let scale = gram.diagonal().mean().max(f64::MIN_POSITIVE);
            let mut solved = None;
            for jitter in [0.0, 1e-12, 1e-9, 1e-6] {
                let mut g = gram.clone();
                for i in 0..m {
                    g[(i, i)] += jitter * scale;
                }
                if let Some(chol) = g.cholesky() {
                    solved = Some(chol.solve(&y_v));
                    break;
                }
            }
            let w = solved.ok_or_else(|| {
                Error::invalid("operator gram matrix is singular; cannot lift observation")
            })?;
            let x = a.transpose() * w;
            Ok(x.as_slice().to_vec())
        }
    }
}
