//! Gaussian algebra of the diffusion chain.
//!
//! Everything here is closed-form manipulation of diagonal Gaussians along a
//! [`NoiseSchedule`]: forward marginals and conditionals, the reverse
//! conditional given a clean signal, denoiser-driven transition kernels
//! (ancestral for VE, DDIM-style for VP), diagonal KL divergence, and the
//! two-sided bridge over an intermediate time.
//!
//! Each distribution-returning operation has a `*_coeffs` companion exposing
//! the scalar coefficients of its mean/std so that callers building
//! differentiable computation graphs can re-create the same expressions
//! symbolically.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::Denoiser;
use crate::error::{ensure, ensure_len, Result};
use crate::schedule::NoiseSchedule;

/// Incremented whenever a transition variance computes slightly negative and
/// is clamped to zero (only possible through floating-point cancellation).
static NEGATIVE_VARIANCE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of negative-variance clamps since process start.
pub fn negative_variance_clamps() -> u64 {
    NEGATIVE_VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

/// Diagonal Gaussian with an optionally scalar (broadcast) std.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    /// Either one entry per mean coordinate or a single broadcast entry.
    /// Entries are nonnegative; zero encodes a deterministic coordinate
    /// (e.g. the η = 0 DDIM limit).
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        ensure!(
            std.len() == mean.len() || std.len() == 1,
            "std length {} incompatible with mean length {}",
            std.len(),
            mean.len()
        );
        ensure!(
            std.iter().all(|s| s.is_finite() && *s >= 0.0),
            "std entries must be finite and nonnegative"
        );
        ensure!(
            mean.iter().all(|m| m.is_finite()),
            "mean entries must be finite"
        );
        Ok(DiagGaussian { mean, std })
    }

    /// Isotropic Gaussian: one shared std for every coordinate.
    pub fn iso(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(mean, vec![std])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Std of coordinate `i`, resolving the scalar broadcast.
    pub fn std_at(&self, i: usize) -> f64 {
        if self.std.len() == 1 {
            self.std[0]
        } else {
            self.std[i]
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let xi: f64 = StandardNormal.sample(rng);
                self.mean[i] + self.std_at(i) * xi
            })
            .collect()
    }

    /// Log density at `x` (requires strictly positive stds).
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        ensure_len!("log_pdf point", self.dim(), x.len());
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let s = self.std_at(i);
            ensure!(s > 0.0, "log_pdf requires positive std, got {s}");
            let r = (x[i] - self.mean[i]) / s;
            acc += -0.5 * r * r - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        Ok(acc)
    }
}

/// Marginal of the noisy state at time t given clean signal `x`:
/// N(α_t·x, σ_t²·I).
pub fn forward_marginal(schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<DiagGaussian> {
    let (a, s) = schedule.alpha_sigma(t)?;
    DiagGaussian::iso(x.iter().map(|v| a * v).collect(), s)
}

/// Scaling α_{t|s} and variance σ_{t|s}² of the forward transition from
/// time s up to time t > s.
pub fn forward_conditional_coeffs(schedule: &NoiseSchedule, s: f64, t: f64) -> Result<(f64, f64)> {
    ensure!(s < t, "forward conditional needs s < t, got s={s}, t={t}");
    let (a_s, sig_s) = schedule.alpha_sigma(s)?;
    let (a_t, sig_t) = schedule.alpha_sigma(t)?;
    let a_ts = a_t / a_s;
    let var = sig_t * sig_t - a_ts * a_ts * sig_s * sig_s;
    ensure!(
        var >= 0.0,
        "forward conditional variance came out negative ({var}); schedule is inconsistent"
    );
    Ok((a_ts, var))
}

/// Forward transition distribution of z_t given z_s for t > s:
/// N(α_{t|s}·z_s, σ_{t|s}²·I).
pub fn forward_conditional(
    schedule: &NoiseSchedule,
    z_s: &[f64],
    s: f64,
    t: f64,
) -> Result<DiagGaussian> {
    let (a_ts, var) = forward_conditional_coeffs(schedule, s, t)?;
    DiagGaussian::iso(z_s.iter().map(|v| a_ts * v).collect(), var.sqrt())
}

/// Mean coefficients (on z_t and on x) and std of the reverse conditional.
pub fn reverse_conditional_coeffs(
    schedule: &NoiseSchedule,
    s: f64,
    t: f64,
) -> Result<(f64, f64, f64)> {
    let (a_ts, var_ts) = forward_conditional_coeffs(schedule, s, t)?;
    let (a_s, sig_s) = schedule.alpha_sigma(s)?;
    let sig_t2 = schedule.sigma_of_t(t)?.powi(2);
    let zt_coef = a_ts * sig_s * sig_s / sig_t2;
    let x_coef = a_s * var_ts / sig_t2;
    let std = (var_ts * sig_s * sig_s / sig_t2).sqrt();
    Ok((zt_coef, x_coef, std))
}

/// Posterior of the intermediate state z_s given z_t and the clean signal x
/// (s < t): product of the forward factors, normalized in closed form.
pub fn reverse_conditional(
    schedule: &NoiseSchedule,
    z_t: &[f64],
    x: &[f64],
    s: f64,
    t: f64,
) -> Result<DiagGaussian> {
    ensure_len!("reverse_conditional x", z_t.len(), x.len());
    let (zt_coef, x_coef, std) = reverse_conditional_coeffs(schedule, s, t)?;
    let mean = z_t
        .iter()
        .zip(x)
        .map(|(zt, xv)| zt_coef * zt + x_coef * xv)
        .collect();
    DiagGaussian::iso(mean, std)
}

/// Coefficients of a denoiser-driven transition mean c_z·z_t + c_e·ε̂ and its
/// std, for one step from t down to s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    pub z_coef: f64,
    pub eps_coef: f64,
    pub std: f64,
}

/// Coefficients of the sampling transition from t down to s:
/// ancestral (posterior-matching) for VE, DDIM-family with noise scale
/// `eta` for VP.
pub fn prior_transition_coeffs(
    schedule: &NoiseSchedule,
    s: f64,
    t: f64,
    eta: f64,
) -> Result<TransitionCoeffs> {
    ensure!(s < t, "transition needs s < t, got s={s}, t={t}");
    ensure!(
        (0.0..=1.0).contains(&eta),
        "eta must lie in [0, 1], got {eta}"
    );
    let (_, sig_s) = schedule.alpha_sigma(s)?;
    let (_, sig_t) = schedule.alpha_sigma(t)?;
    match schedule.kind() {
        crate::schedule::ScheduleKind::Ve => {
            // Mean (σ_s²/σ_t²)·z_t + ((σ_t²−σ_s²)/σ_t²)·x̂ with x̂ = z_t − σ_t·ε̂
            // collapses to z_t − ((σ_t²−σ_s²)/σ_t)·ε̂.
            let gap = sig_t * sig_t - sig_s * sig_s;
            Ok(TransitionCoeffs {
                z_coef: 1.0,
                eps_coef: -gap / sig_t,
                std: (gap * sig_s * sig_s / (sig_t * sig_t)).sqrt(),
            })
        }
        crate::schedule::ScheduleKind::Vp => {
            let (a_s, _) = schedule.alpha_sigma(s)?;
            let (a_t, _) = schedule.alpha_sigma(t)?;
            let abar_s = a_s * a_s;
            let abar_t = a_t * a_t;
            let mut var_tilde = eta * eta * (sig_s * sig_s / (sig_t * sig_t)) * (1.0 - abar_t / abar_s);
            if var_tilde < 0.0 {
                NEGATIVE_VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
                var_tilde = 0.0;
            }
            let mut dir = 1.0 - abar_s - var_tilde;
            if dir < 0.0 {
                NEGATIVE_VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
                dir = 0.0;
            }
            // Mean α_s·x̂ + sqrt(1−α_s²−σ̃²)·ε̂ with x̂ = (z_t − σ_t·ε̂)/α_t.
            Ok(TransitionCoeffs {
                z_coef: a_s / a_t,
                eps_coef: dir.sqrt() - (a_s / a_t) * sig_t,
                std: var_tilde.sqrt(),
            })
        }
    }
}

/// One denoiser-driven sampling transition from t down to s.
pub fn prior_transition(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    z_t: &[f64],
    s: f64,
    t: f64,
    eta: f64,
) -> Result<DiagGaussian> {
    let coeffs = prior_transition_coeffs(schedule, s, t, eta)?;
    let eps = denoiser.eps_hat(z_t, t)?;
    ensure_len!("denoiser output", z_t.len(), eps.len());
    let mean = z_t
        .iter()
        .zip(&eps)
        .map(|(z, e)| coeffs.z_coef * z + coeffs.eps_coef * e)
        .collect();
    DiagGaussian::iso(mean, coeffs.std)
}

/// KL(q ‖ p) between diagonal Gaussians of the same dimension.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    ensure_len!("kl_diag p", q.dim(), p.dim());
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let sq = q.std_at(i);
        let sp = p.std_at(i);
        ensure!(
            sq > 0.0 && sp > 0.0,
            "kl_diag requires strictly positive stds, got q.std={sq}, p.std={sp}"
        );
        let dm = q.mean[i] - p.mean[i];
        acc += (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    Ok(acc)
}

/// Mean coefficients (on z_t and z_Te) and std of the bridge posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub zt_coef: f64,
    pub zte_coef: f64,
    pub std: f64,
}

/// Coefficients of the posterior over the midpoint state z_s given the
/// endpoints z_t (above) and z_Te (below), Te < s < t.
pub fn bridge_coeffs(schedule: &NoiseSchedule, s: f64, t: f64, te: f64) -> Result<BridgeCoeffs> {
    ensure!(
        te < s && s < t,
        "bridge needs Te < s < t, got Te={te}, s={s}, t={t}"
    );
    let (a_ts, var_ts) = forward_conditional_coeffs(schedule, s, t)?;
    let (a_ste, var_ste) = forward_conditional_coeffs(schedule, te, s)?;
    // Product of N(z_t; α_{t|s}·z_s, σ_{t|s}²) and N(z_s; α_{s|Te}·z_Te, σ_{s|Te}²),
    // normalized over z_s.
    let denom = var_ts + a_ts * a_ts * var_ste;
    Ok(BridgeCoeffs {
        zt_coef: a_ts * var_ste / denom,
        zte_coef: a_ste * var_ts / denom,
        std: (var_ts * var_ste / denom).sqrt(),
    })
}

/// Posterior of z_s given both bridge endpoints z_t and z_Te (Te < s < t).
pub fn bridge_posterior(
    schedule: &NoiseSchedule,
    z_t: &[f64],
    z_te: &[f64],
    s: f64,
    t: f64,
    te: f64,
) -> Result<DiagGaussian> {
    ensure_len!("bridge z_Te", z_t.len(), z_te.len());
    let c = bridge_coeffs(schedule, s, t, te)?;
    let mean = z_t
        .iter()
        .zip(z_te)
        .map(|(zt, zte)| c.zt_coef * zt + c.zte_coef * zte)
        .collect();
    DiagGaussian::iso(mean, c.std)
}

/// Denoiser-based prediction of the bridge's lower endpoint from its upper
/// one: ẑ_Te = (z_t − σ_{t|Te}·ε̂(z_t, t)) / α_{t|Te}.
pub fn predict_zte(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    z_t: &[f64],
    t: f64,
    te: f64,
) -> Result<Vec<f64>> {
    let (a_tte, var_tte) = forward_conditional_coeffs(schedule, te, t)?;
    let sig_tte = var_tte.sqrt();
    let eps = denoiser.eps_hat(z_t, t)?;
    ensure_len!("denoiser output", z_t.len(), eps.len());
    Ok(z_t
        .iter()
        .zip(&eps)
        .map(|(z, e)| (z - sig_tte * e) / a_tte)
        .collect())
}

/// Model-side bridge distribution: the bridge posterior with the realized
/// lower endpoint replaced by the denoiser prediction ẑ_Te(z_t, t).
pub fn bridge_prior(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    z_t: &[f64],
    s: f64,
    t: f64,
    te: f64,
) -> Result<DiagGaussian> {
    let zhat = predict_zte(schedule, denoiser, z_t, t, te)?;
    bridge_posterior(schedule, z_t, &zhat, s, t, te)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::DEFAULT_RHO;

    /// Test stub returning a fixed ε̂ regardless of input.
    struct ConstEps(Vec<f64>);

    impl Denoiser for ConstEps {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eps_hat(&self, _z: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn eps_vjp(&self, _z: &[f64], _t: f64, w: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; w.len()])
        }
    }

    fn ve() -> NoiseSchedule {
        NoiseSchedule::ve(0.002, 50.0).unwrap()
    }

    #[test]
    fn forward_marginal_ve_and_vp() {
        let g = forward_marginal(&ve(), &[1.0, -1.0], 2.0).unwrap();
        assert_eq!(g.mean, vec![1.0, -1.0]);
        assert_eq!(g.std, vec![2.0]);

        let vp = NoiseSchedule::vp_default();
        let t = vp.t_of_sigma(0.19f64.sqrt()).unwrap();
        let g = forward_marginal(&vp, &[2.0], t).unwrap();
        assert!((g.mean[0] - 1.8).abs() < 1e-12);
        assert!((g.std[0] - 0.19f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forward_conditional_ve_variance() {
        let (a, var) = forward_conditional_coeffs(&ve(), 1.0, 2.0).unwrap();
        assert_eq!(a, 1.0);
        assert!((var - 3.0).abs() < 1e-15);
    }

    #[test]
    fn forward_conditional_composes_to_marginal() {
        // α_{t|s}·α_s = α_t and α_{t|s}²·σ_s² + σ_{t|s}² = σ_t² at random pairs.
        for sched in [ve(), NoiseSchedule::vp_default()] {
            let mut r = rng::stream(7, "pairs");
            for _ in 0..100 {
                let u: f64 = r.random();
                let v: f64 = r.random();
                let t_max = sched.t_max();
                let (lo, hi) = (
                    t_max * (0.001 + 0.499 * u.min(v)),
                    t_max * (0.5 + 0.5 * u.max(v)),
                );
                let (a_ts, var_ts) = forward_conditional_coeffs(&sched, lo, hi).unwrap();
                let (a_s, sig_s) = sched.alpha_sigma(lo).unwrap();
                let (a_t, sig_t) = sched.alpha_sigma(hi).unwrap();
                assert!((a_ts * a_s - a_t).abs() < 1e-12);
                assert!(
                    (a_ts * a_ts * sig_s * sig_s + var_ts - sig_t * sig_t).abs()
                        < 1e-12 * sig_t.max(1.0).powi(2)
                );
            }
        }
    }

    #[test]
    fn reverse_conditional_ve_variance() {
        let g = reverse_conditional(&ve(), &[0.3], &[0.1], 1.0, 2.0).unwrap();
        assert!((g.std[0] * g.std[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn reverse_conditional_pins_to_x_at_low_s() {
        let vp = NoiseSchedule::vp_default();
        let g = reverse_conditional(&vp, &[0.9], &[2.0], 0.001, 500.0).unwrap();
        let (a_s, _) = vp.alpha_sigma(0.001).unwrap();
        assert!((g.mean[0] - a_s * 2.0).abs() < 1e-3);
        assert!(g.std[0] < 0.02);
    }

    fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
        let r = (x - mean) / std;
        (-0.5 * r * r).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Shared quadrature harness: compares an analytic 1-D Gaussian density
    /// against the normalized product of two Gaussian factors in z_s.
    fn grid_bayes_check(
        analytic: &DiagGaussian,
        factor: impl Fn(f64) -> f64,
        center: f64,
        halfwidth: f64,
    ) -> f64 {
        let n = 16001; // odd, for Simpson weights
        let h = 2.0 * halfwidth / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| center - halfwidth + i as f64 * h).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| factor(x)).collect();
        let mut integral = 0.0;
        for i in (0..n - 2).step_by(2) {
            integral += h / 3.0 * (fs[i] + 4.0 * fs[i + 1] + fs[i + 2]);
        }
        xs.iter()
            .zip(&fs)
            .map(|(&x, &f)| {
                let p = normal_pdf(x, analytic.mean[0], analytic.std[0]);
                (f / integral - p).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn reverse_conditional_matches_grid_bayes() {
        for (sched, s, t) in [
            (ve(), 1.0, 2.0),
            (NoiseSchedule::vp_default(), 300.0, 700.0),
        ] {
            let (z_t, x) = (0.7, -0.4);
            let g = reverse_conditional(&sched, &[z_t], &[x], s, t).unwrap();
            let (a_ts, var_ts) = forward_conditional_coeffs(&sched, s, t).unwrap();
            let (a_s, sig_s) = sched.alpha_sigma(s).unwrap();
            let err = grid_bayes_check(
                &g,
                |zs| {
                    normal_pdf(z_t, a_ts * zs, var_ts.sqrt()) * normal_pdf(zs, a_s * x, sig_s)
                },
                g.mean[0],
                10.0 * g.std[0].max(sig_s),
            );
            assert!(err < 1e-6, "max density error {err}");
        }
    }

    #[test]
    fn prior_transition_ve_matches_posterior_form() {
        // With a constant ε̂ the VE mean must equal z_t − ((σ_t²−σ_s²)/σ_t)·ε̂
        // and the variance the reverse-conditional one.
        let eps = 0.3;
        let g = prior_transition(&ve(), &ConstEps(vec![eps]), &[1.0], 1.0, 2.0, 0.7).unwrap();
        assert!((g.mean[0] - (1.0 - 3.0 / 2.0 * eps)).abs() < 1e-15);
        assert!((g.std[0] * g.std[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn prior_transition_vp_eta_zero_is_deterministic() {
        let vp = NoiseSchedule::vp_default();
        let c = prior_transition_coeffs(&vp, 300.0, 700.0, 0.0).unwrap();
        assert_eq!(c.std, 0.0);
        // η = 1 matches the ancestral reverse-conditional variance.
        let c1 = prior_transition_coeffs(&vp, 300.0, 700.0, 1.0).unwrap();
        let (a_s, sig_s) = vp.alpha_sigma(300.0).unwrap();
        let (a_t, sig_t) = vp.alpha_sigma(700.0).unwrap();
        let expect =
            (sig_s * sig_s / (sig_t * sig_t)) * (1.0 - (a_t * a_t) / (a_s * a_s));
        assert!((c1.std * c1.std - expect).abs() < 1e-15);
        // Mean coefficients agree across η: only the noise scale changes…
        assert!((c1.z_coef - a_s / a_t).abs() < 1e-15);
        // …and the ε̂ coefficient stays finite and real.
        assert!(c1.eps_coef.is_finite());
    }

    #[test]
    fn prior_transition_vp_eta_midrange_variance() {
        let vp = NoiseSchedule::vp_default();
        let eta = 0.2;
        let c = prior_transition_coeffs(&vp, 300.0, 700.0, eta).unwrap();
        let c1 = prior_transition_coeffs(&vp, 300.0, 700.0, 1.0).unwrap();
        assert!((c.std * c.std - eta * eta * c1.std * c1.std).abs() < 1e-15);
    }

    #[test]
    fn kl_diag_known_values() {
        let q = DiagGaussian::iso(vec![0.0], 1.0).unwrap();
        let p = DiagGaussian::iso(vec![1.0], 1.0).unwrap();
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
        assert!((kl_diag(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diag(&p, &q).unwrap() > 0.0);
    }

    #[test]
    fn kl_diag_matches_monte_carlo() {
        let mut r = rng::stream(11, "klmc");
        let q = DiagGaussian::new(
            rng::normal_vec(&mut r, 5),
            (0..5).map(|_| 0.5 + r.random::<f64>()).collect(),
        )
        .unwrap();
        let p = DiagGaussian::new(
            rng::normal_vec(&mut r, 5),
            (0..5).map(|_| 0.5 + r.random::<f64>()).collect(),
        )
        .unwrap();
        let exact = kl_diag(&q, &p).unwrap();
        let n = 100_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let z = q.sample(&mut r);
            let v = q.log_pdf(&z).unwrap() - p.log_pdf(&z).unwrap();
            sum += v;
            sum2 += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sum2 / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (mc - exact).abs() < 3.0 * se,
            "mc {mc} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn bridge_posterior_ve_variance() {
        // σ values (Te, s, t) = (1, 2, 3): variance (9−4)(4−1)/((9−4)+(4−1)).
        let g = bridge_posterior(&ve(), &[0.0], &[0.0], 2.0, 3.0, 1.0).unwrap();
        assert!((g.std[0] * g.std[0] - 15.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn bridge_posterior_pins_to_zte_near_te() {
        let c = bridge_coeffs(&ve(), 1.0 + 1e-9, 3.0, 1.0).unwrap();
        assert!((c.zte_coef - 1.0).abs() < 1e-6);
        assert!(c.zt_coef.abs() < 1e-6);
        assert!(c.std < 1e-4);
    }

    #[test]
    fn bridge_posterior_matches_grid_bayes() {
        for (sched, te, s, t) in [
            (ve(), 1.0, 2.0, 3.0),
            (NoiseSchedule::vp_default(), 200.0, 400.0, 700.0),
        ] {
            let (z_t, z_te) = (0.9, -0.2);
            let g = bridge_posterior(&sched, &[z_t], &[z_te], s, t, te).unwrap();
            let (a_ts, var_ts) = forward_conditional_coeffs(&sched, s, t).unwrap();
            let (a_ste, var_ste) = forward_conditional_coeffs(&sched, te, s).unwrap();
            let err = grid_bayes_check(
                &g,
                |zs| {
                    normal_pdf(z_t, a_ts * zs, var_ts.sqrt())
                        * normal_pdf(zs, a_ste * z_te, var_ste.sqrt())
                },
                g.mean[0],
                10.0 * g.std[0].max(var_ste.sqrt()),
            );
            assert!(err < 1e-6, "max density error {err}");
        }
    }

    #[test]
    fn bridge_prior_equals_posterior_under_perfect_prediction() {
        // Build z_t from a realized ε and hand the denoiser exactly that ε.
        for sched in [ve(), NoiseSchedule::vp_default()] {
            let t_max = sched.t_max();
            let (te, s, t) = (0.02 * t_max, 0.04 * t_max, 0.07 * t_max);
            let z_te = vec![0.4, -1.1];
            let eps = vec![0.6, 0.25];
            let (a_tte, var_tte) = forward_conditional_coeffs(&sched, te, t).unwrap();
            let z_t: Vec<f64> = z_te
                .iter()
                .zip(&eps)
                .map(|(z, e)| a_tte * z + var_tte.sqrt() * e)
                .collect();
            let den = ConstEps(eps);
            let prior = bridge_prior(&sched, &den, &z_t, s, t, te).unwrap();
            let post = bridge_posterior(&sched, &z_t, &z_te, s, t, te).unwrap();
            for i in 0..2 {
                assert!((prior.mean[i] - post.mean[i]).abs() < 1e-10);
            }
            assert_eq!(prior.std, post.std);
            assert!(kl_diag(&post, &prior).unwrap() < 1e-18);
        }
    }

    #[test]
    fn bridge_kl_positive_when_prediction_is_off() {
        let den = ConstEps(vec![0.0, 0.0]);
        let z_t = vec![1.0, -1.0];
        let z_te = vec![0.2, 0.3];
        let prior = bridge_prior(&ve(), &den, &z_t, 2.0, 3.0, 1.0).unwrap();
        let post = bridge_posterior(&ve(), &z_t, &z_te, 2.0, 3.0, 1.0).unwrap();
        assert!(kl_diag(&post, &prior).unwrap() > 0.0);
    }

    #[test]
    fn bridge_kl_reduces_to_mean_gap_formula() {
        // Equal stds ⇒ KL = zte_coef²·‖z_Te − ẑ_Te‖² / (2σ_Q²).
        let sched = NoiseSchedule::vp_default();
        let (te, s, t) = (200.0, 400.0, 700.0);
        let den = ConstEps(vec![0.15, -0.35]);
        let z_t = vec![0.8, 0.1];
        let z_te = vec![-0.3, 0.45];
        let prior = bridge_prior(&sched, &den, &z_t, s, t, te).unwrap();
        let post = bridge_posterior(&sched, &z_t, &z_te, s, t, te).unwrap();
        let c = bridge_coeffs(&sched, s, t, te).unwrap();
        let zhat = predict_zte(&sched, &den, &z_t, t, te).unwrap();
        let gap2: f64 = z_te
            .iter()
            .zip(&zhat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let direct = kl_diag(&post, &prior).unwrap();
        let shortcut = c.zte_coef * c.zte_coef * gap2 / (2.0 * c.std * c.std);
        assert!((direct - shortcut).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn sampling_respects_moments() {
        let g = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let mut r = rng::stream(3, "moments");
        let n = 200_000;
        let mut mean = [0.0; 2];
        let mut var = [0.0; 2];
        for _ in 0..n {
            let z = g.sample(&mut r);
            for i in 0..2 {
                mean[i] += z[i];
                var[i] += (z[i] - g.mean[i]) * (z[i] - g.mean[i]);
            }
        }
        for i in 0..2 {
            mean[i] /= n as f64;
            var[i] /= n as f64;
            assert!((mean[i] - g.mean[i]).abs() < 0.02 * g.std[i].max(1.0));
            assert!((var[i] - g.std[i] * g.std[i]).abs() < 0.05 * g.std[i] * g.std[i]);
        }
    }

    #[test]
    fn grid_endpoints_usable_for_transitions() {
        // Every adjacent pair of a power-law grid is a valid transition.
        for sched in [ve(), NoiseSchedule::vp_default()] {
            let grid = sched
                .edm_grid(20, sched.t_floor(), sched.t_max(), DEFAULT_RHO)
                .unwrap();
            for (t, s) in grid.pairs() {
                prior_transition_coeffs(&sched, s, t, 0.5).unwrap();
            }
        }
    }
}
