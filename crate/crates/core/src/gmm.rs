//! Exactly solvable data distribution: a Gaussian-mixture prior, its
//! diffusion-time marginals, and its exact posterior under any of the linear
//! measurement models with Gaussian noise.
//!
//! The prior uses diagonal component covariances. The posterior components
//! are full-covariance Gaussians, because blur/downsample measurements
//! correlate coordinates; each component is the standard conjugate
//! linear-Gaussian update and the component weights are reweighted by their
//! marginal likelihoods.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, ensure_len, Error, Result};
use crate::operators::MeasurementOp;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::util::{logsumexp, normal_log_pdf, LN_2PI};

/// Mixture of diagonal-covariance Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(!weights.is_empty(), "mixture needs at least one component");
        ensure_len!("means", weights.len(), means.len());
        ensure_len!("covs", weights.len(), covs.len());
        let total: f64 = weights.iter().sum();
        ensure!(
            (total - 1.0).abs() < 1e-12,
            "weights must sum to 1, got {total}"
        );
        ensure!(
            weights.iter().all(|w| *w > 0.0),
            "weights must be strictly positive"
        );
        let dim = means[0].len();
        ensure!(dim > 0, "components must have positive dimension");
        for (m, c) in means.iter().zip(&covs) {
            ensure_len!("component mean", dim, m.len());
            ensure_len!("component cov", dim, c.len());
            ensure!(
                c.iter().all(|v| v.is_finite() && *v > 0.0),
                "covariance entries must be positive"
            );
        }
        Ok(GmmPrior {
            weights,
            means,
            covs,
        })
    }

    /// Equal-weight mixture.
    pub fn uniform(means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Result<Self> {
        let k = means.len();
        ensure!(k > 0, "mixture needs at least one component");
        Self::new(vec![1.0 / k as f64; k], means, covs)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[Vec<f64>] {
        &self.covs
    }

    /// Mixture log density.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        ensure_len!("point", self.dim(), x.len());
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| {
                self.weights[k].ln()
                    + x.iter()
                        .zip(&self.means[k])
                        .zip(&self.covs[k])
                        .map(|((xi, mi), ci)| normal_log_pdf(*xi, *mi, *ci))
                        .sum::<f64>()
            })
            .collect();
        Ok(logsumexp(&terms))
    }

    fn draw_component<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        weights.len() - 1
    }

    fn sample_impl<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut labels = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let k = Self::draw_component(&self.weights, rng);
            labels.push(k);
            out.push(
                self.means[k]
                    .iter()
                    .zip(&self.covs[k])
                    .map(|(m, c)| {
                        let xi: f64 = StandardNormal.sample(rng);
                        m + c.sqrt() * xi
                    })
                    .collect(),
            );
        }
        (labels, out)
    }

    /// Draw `n` points, deterministically under `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, "gmm-sample");
        self.sample_impl(n, &mut r).1
    }

    /// Mixture mean and (dense) covariance in closed form.
    pub fn mixture_moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for i in 0..d {
                mean[i] += w * m[i];
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for k in 0..self.n_components() {
            let w = self.weights[k];
            for i in 0..d {
                cov[i][i] += w * self.covs[k][i];
                for j in 0..d {
                    cov[i][j] += w * (self.means[k][i] - mean[i]) * (self.means[k][j] - mean[j]);
                }
            }
        }
        (mean, cov)
    }

    /// Pushforward through the forward diffusion to time t: component k
    /// becomes N(α_t·m_k, α_t²·C_k + σ_t²·I); weights are unchanged.
    pub fn marginal_at(&self, schedule: &NoiseSchedule, t: f64) -> Result<GmmPrior> {
        let (a, s) = schedule.alpha_sigma(t)?;
        Ok(GmmPrior {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| a * v).collect())
                .collect(),
            covs: self
                .covs
                .iter()
                .map(|c| c.iter().map(|v| a * a * v + s * s).collect())
                .collect(),
        })
    }
}

/// Mixture of full-covariance Gaussians: the exact posterior of a
/// [`GmmPrior`] under a linear measurement with Gaussian noise.
#[derive(Debug, Clone)]
pub struct GmmPosterior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    /// Lower Cholesky factor of each component covariance.
    chol_l: Vec<DMatrix<f64>>,
}

impl GmmPosterior {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean_of(&self, k: usize) -> Vec<f64> {
        self.means[k].iter().cloned().collect()
    }

    pub fn cov_of(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.covs[k][(i, j)]).collect())
            .collect()
    }

    fn component_log_pdf(&self, k: usize, x: &DVector<f64>) -> Result<f64> {
        let r = x - &self.means[k];
        let l = &self.chol_l[k];
        let u = l
            .solve_lower_triangular(&r)
            .ok_or_else(|| Error::invalid("singular component covariance"))?;
        let logdet: f64 = 2.0 * (0..self.dim()).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(-0.5 * (u.norm_squared() + logdet + self.dim() as f64 * LN_2PI))
    }

    /// Mixture log density.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        ensure_len!("point", self.dim(), x.len());
        let xv = DVector::from_column_slice(x);
        let mut terms = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            terms.push(self.weights[k].ln() + self.component_log_pdf(k, &xv)?);
        }
        Ok(logsumexp(&terms))
    }

    /// Posterior probability of each component having generated `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len!("point", self.dim(), x.len());
        let xv = DVector::from_column_slice(x);
        let mut terms = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            terms.push(self.weights[k].ln() + self.component_log_pdf(k, &xv)?);
        }
        let norm = logsumexp(&terms);
        Ok(terms.iter().map(|t| (t - norm).exp()).collect())
    }

    /// Index of the most responsible component for `x`.
    pub fn map_component(&self, x: &[f64]) -> Result<usize> {
        let r = self.responsibilities(x)?;
        Ok(r.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0))
    }

    /// Draw `n` points, deterministically under `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, "gmm-sample");
        let d = self.dim();
        (0..n)
            .map(|_| {
                let k = GmmPrior::draw_component(&self.weights, &mut r);
                let xi = DVector::from_vec(rng::normal_vec(&mut r, d));
                let z = &self.means[k] + &self.chol_l[k] * xi;
                z.iter().cloned().collect()
            })
            .collect()
    }

    /// Mixture mean and covariance in closed form.
    pub fn mixture_moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (w, m) in self.weights.iter().zip(&self.means) {
            mean += m * *w;
        }
        let mut cov = DMatrix::zeros(d, d);
        for k in 0..self.n_components() {
            let dm = &self.means[k] - &mean;
            cov += (&self.covs[k] + &dm * dm.transpose()) * self.weights[k];
        }
        (
            mean.iter().cloned().collect(),
            (0..d)
                .map(|i| (0..d).map(|j| cov[(i, j)]).collect())
                .collect(),
        )
    }
}

/// Dense matrix of a linear operator, built by applying it to basis vectors.
fn matrix_of(op: &MeasurementOp, in_dim: usize) -> Result<DMatrix<f64>> {
    let out_dim = op.obs_dim(in_dim)?;
    let mut a = DMatrix::zeros(out_dim, in_dim);
    for j in 0..in_dim {
        let mut e = vec![0.0; in_dim];
        e[j] = 1.0;
        let col = op.apply(&e)?;
        for i in 0..out_dim {
            a[(i, j)] = col[i];
        }
    }
    Ok(a)
}

fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let d = m.nrows();
    let scale = (0..d).map(|i| m[(i, i)].abs()).sum::<f64>() / d as f64;
    for jitter in [0.0, 1e-14, 1e-12, 1e-10, 1e-8] {
        for i in 0..d {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(c);
        }
    }
    Err(Error::invalid(
        "posterior covariance is not positive definite",
    ))
}

/// Exact posterior of the prior given observation `y = A·x + v`,
/// v ~ N(0, σ_v²·I). Requires σ_v > 0; use a tiny σ_v to approximate
/// noiseless measurements.
pub fn exact_posterior(
    prior: &GmmPrior,
    op: &MeasurementOp,
    y: &[f64],
) -> Result<GmmPosterior> {
    ensure!(
        op.sigma_v > 0.0,
        "exact posterior requires sigma_v > 0 (use a tiny value for noiseless setups)"
    );
    let d = prior.dim();
    let a = matrix_of(op, d)?;
    let obs = a.nrows();
    ensure_len!("observation", obs, y.len());
    let yv = DVector::from_column_slice(y);
    let noise = op.sigma_v * op.sigma_v;

    let mut log_weights = Vec::with_capacity(prior.n_components());
    let mut means = Vec::with_capacity(prior.n_components());
    let mut covs = Vec::with_capacity(prior.n_components());
    let mut chol_l = Vec::with_capacity(prior.n_components());

    for k in 0..prior.n_components() {
        let m = DVector::from_column_slice(&prior.means()[k]);
        let c = DMatrix::from_diagonal(&DVector::from_column_slice(&prior.covs()[k]));
        let ac = &a * &c;
        let s = &ac * a.transpose() + DMatrix::identity(obs, obs) * noise;
        let chol_s = Cholesky::new(s)
            .ok_or_else(|| Error::invalid("observation covariance is not positive definite"))?;

        let resid = &yv - &a * &m;
        // Marginal likelihood of this component: N(y; A·m, A·C·Aᵀ + σ_v²·I).
        let solved = chol_s.solve(&resid);
        let l = chol_s.l();
        let logdet: f64 = 2.0 * (0..obs).map(|i| l[(i, i)].ln()).sum::<f64>();
        let loglik = -0.5 * (resid.dot(&solved) + logdet + obs as f64 * LN_2PI);
        log_weights.push(prior.weights()[k].ln() + loglik);

        // Conjugate update: gain K = C·Aᵀ·S⁻¹.
        let gain = chol_s.solve(&ac).transpose();
        let mean = &m + &gain * &resid;
        let mut cov = &c - &gain * &ac;
        cov = (&cov + cov.transpose()) * 0.5;
        let chol_c = cholesky_with_jitter(cov.clone())?;
        means.push(mean);
        covs.push(cov);
        chol_l.push(chol_c.l());
    }

    let norm = logsumexp(&log_weights);
    let weights: Vec<f64> = log_weights.iter().map(|w| (w - norm).exp()).collect();
    Ok(GmmPosterior {
        weights,
        means,
        covs,
        chol_l,
    })
}
