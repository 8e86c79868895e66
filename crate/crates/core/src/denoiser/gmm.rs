//! Bayes-optimal denoiser for a Gaussian-mixture prior.
//!
//! Under a GMM prior the posterior mean E[x | z_t] is available in closed
//! form: per-component conjugate posterior means blended by softmax
//! responsibilities under the component marginals N(α_t·m_k, α_t²·C_k +
//! σ_t²·I). The noise prediction follows as ε̂ = (z_t − α_t·E[x|z_t])/σ_t,
//! and the Jacobian of the blend is analytic, giving exact VJPs.

use crate::denoiser::Denoiser;
use crate::error::{ensure_len, Result};
use crate::gmm::GmmPrior;
use crate::schedule::NoiseSchedule;
use crate::util::{logsumexp, normal_log_pdf};

#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    prior: GmmPrior,
    schedule: NoiseSchedule,
}

/// Per-query intermediates of the posterior-mean computation.
struct Blend {
    /// Softmax responsibilities r_k.
    resp: Vec<f64>,
    /// Per-component posterior means m̃_k.
    post_means: Vec<Vec<f64>>,
    /// Per-component gains g_k = α·c_k / v_k = ∂m̃_k/∂z (elementwise).
    gains: Vec<Vec<f64>>,
    /// Score of each component marginal: u_k = −(z − α·m_k)/v_k.
    scores: Vec<Vec<f64>>,
    /// Posterior mean E[x|z].
    mean: Vec<f64>,
    alpha: f64,
    sigma: f64,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior, schedule: NoiseSchedule) -> Self {
        GmmDenoiser { prior, schedule }
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn blend(&self, z: &[f64], t: f64) -> Result<Blend> {
        ensure_len!("denoiser input", self.prior.dim(), z.len());
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let k_n = self.prior.n_components();
        let d = self.prior.dim();

        let mut log_terms = Vec::with_capacity(k_n);
        let mut post_means = Vec::with_capacity(k_n);
        let mut gains = Vec::with_capacity(k_n);
        let mut scores = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let m = &self.prior.means()[k];
            let c = &self.prior.covs()[k];
            let mut log_term = self.prior.weights()[k].ln();
            let mut pm = Vec::with_capacity(d);
            let mut gain = Vec::with_capacity(d);
            let mut score = Vec::with_capacity(d);
            for i in 0..d {
                let v = alpha * alpha * c[i] + sigma * sigma;
                let centered = z[i] - alpha * m[i];
                log_term += normal_log_pdf(z[i], alpha * m[i], v);
                let g = alpha * c[i] / v;
                pm.push(m[i] + g * centered);
                gain.push(g);
                score.push(-centered / v);
            }
            log_terms.push(log_term);
            post_means.push(pm);
            gains.push(gain);
            scores.push(score);
        }
        let norm = logsumexp(&log_terms);
        let resp: Vec<f64> = log_terms.iter().map(|lt| (lt - norm).exp()).collect();

        let mut mean = vec![0.0; d];
        for k in 0..k_n {
            for i in 0..d {
                mean[i] += resp[k] * post_means[k][i];
            }
        }
        Ok(Blend {
            resp,
            post_means,
            gains,
            scores,
            mean,
            alpha,
            sigma,
        })
    }

    /// Posterior mean E[x | z_t] in closed form.
    pub fn posterior_mean(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.blend(z, t)?.mean)
    }

    /// Responsibilities of each prior component for the noisy state z_t.
    pub fn responsibilities(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.blend(z, t)?.resp)
    }
}

impl Denoiser for GmmDenoiser {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eps_hat(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let b = self.blend(z, t)?;
        Ok(z.iter()
            .zip(&b.mean)
            .map(|(zi, ei)| (zi - b.alpha * ei) / b.sigma)
            .collect())
    }

    fn eps_vjp(&self, z: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        ensure_len!("cotangent", z.len(), cotangent.len());
        let b = self.blend(z, t)?;
        let d = z.len();
        // ∂E/∂z = Σ_k [ m̃_k ⊗ r_k(u_k − ū) + r_k·diag(g_k) ] with
        // ū = Σ_j r_j·u_j, so the transpose-apply is a responsibility-weighted
        // combination of score differences and diagonal gains.
        let mut ubar = vec![0.0; d];
        for k in 0..b.resp.len() {
            for i in 0..d {
                ubar[i] += b.resp[k] * b.scores[k][i];
            }
        }
        let mut jt_w = vec![0.0; d];
        for k in 0..b.resp.len() {
            let proj: f64 = b.post_means[k]
                .iter()
                .zip(cotangent)
                .map(|(m, w)| m * w)
                .sum();
            for i in 0..d {
                jt_w[i] += b.resp[k]
                    * ((b.scores[k][i] - ubar[i]) * proj + b.gains[k][i] * cotangent[i]);
            }
        }
        // ε̂ = (z − α·E)/σ ⇒ ∂ε̂/∂z = (I − α·∂E/∂z)/σ.
        Ok(cotangent
            .iter()
            .zip(&jt_w)
            .map(|(w, j)| (w - b.alpha * j) / b.sigma)
            .collect())
    }
}
