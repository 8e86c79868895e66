//! Noise schedules and time discretizations.
//!
//! A schedule fixes the signal/noise coefficient pair (α_t, σ_t) for every
//! diffusion time t ∈ (0, T]. Two conventions are supported:
//!
//! * variance-exploding (VE): α ≡ 1, and time is identified with the noise
//!   level itself, σ(t) = t, so T = σ_max;
//! * variance-preserving (VP): σ(t)² ramps linearly in t between configured
//!   bounds and α(t) = sqrt(1 − σ(t)²).
//!
//! Discrete-step methods operate on a [`TimeGrid`] built by the power-law
//! rule with exponent ρ: σ_i^(1/ρ) interpolates linearly between the two
//! endpoint noise levels, which concentrates points at low noise for ρ > 1.

use crate::error::{ensure, Result};

/// Default exponent of the power-law time discretization.
pub const DEFAULT_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Ve,
    Vp,
}

/// The (α_t, σ_t) coefficient pair of a diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSchedule {
    Ve {
        sigma_min: f64,
        sigma_max: f64,
    },
    Vp {
        sigma2_min: f64,
        sigma2_max: f64,
        t_max: f64,
    },
}

impl NoiseSchedule {
    /// Variance-exploding schedule over σ ∈ [sigma_min, sigma_max].
    pub fn ve(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        ensure!(
            sigma_min.is_finite() && sigma_min > 0.0,
            "ve sigma_min must be positive, got {sigma_min}"
        );
        ensure!(
            sigma_max.is_finite() && sigma_max > sigma_min,
            "ve requires sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
        );
        Ok(NoiseSchedule::Ve {
            sigma_min,
            sigma_max,
        })
    }

    /// Variance-preserving schedule with σ(t)² linear in t over [0, t_max].
    pub fn vp(sigma2_min: f64, sigma2_max: f64, t_max: f64) -> Result<Self> {
        ensure!(
            sigma2_min > 0.0 && sigma2_min < 1.0,
            "vp sigma2_min must lie in (0, 1), got {sigma2_min}"
        );
        ensure!(
            sigma2_max > sigma2_min && sigma2_max < 1.0,
            "vp requires sigma2_min < sigma2_max < 1, got [{sigma2_min}, {sigma2_max}]"
        );
        ensure!(
            t_max.is_finite() && t_max > 0.0,
            "vp t_max must be positive, got {t_max}"
        );
        Ok(NoiseSchedule::Vp {
            sigma2_min,
            sigma2_max,
            t_max,
        })
    }

    /// The conventional VP schedule: σ² from 1e-4 to 0.999 over T = 1000.
    pub fn vp_default() -> Self {
        NoiseSchedule::Vp {
            sigma2_min: 1e-4,
            sigma2_max: 0.999,
            t_max: 1000.0,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            NoiseSchedule::Ve { .. } => ScheduleKind::Ve,
            NoiseSchedule::Vp { .. } => ScheduleKind::Vp,
        }
    }

    /// Terminal time T.
    pub fn t_max(&self) -> f64 {
        match *self {
            NoiseSchedule::Ve { sigma_max, .. } => sigma_max,
            NoiseSchedule::Vp { t_max, .. } => t_max,
        }
    }

    /// Conventional lowest time for full-range grids (σ_min for VE; a small
    /// positive fraction of T for VP, where σ² is already near its floor).
    pub fn t_floor(&self) -> f64 {
        match *self {
            NoiseSchedule::Ve { sigma_min, .. } => sigma_min,
            NoiseSchedule::Vp { t_max, .. } => t_max / 1000.0,
        }
    }

    fn check_t(&self, t: f64) -> Result<()> {
        ensure!(
            t.is_finite() && t > 0.0 && t <= self.t_max(),
            "time {t} outside (0, {}]",
            self.t_max()
        );
        Ok(())
    }

    /// The coefficient pair (α_t, σ_t) for 0 < t ≤ T.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_t(t)?;
        match *self {
            NoiseSchedule::Ve { .. } => Ok((1.0, t)),
            NoiseSchedule::Vp {
                sigma2_min,
                sigma2_max,
                t_max,
            } => {
                let s2 = sigma2_min + (t / t_max) * (sigma2_max - sigma2_min);
                Ok(((1.0 - s2).sqrt(), s2.sqrt()))
            }
        }
    }

    /// Signal-to-noise ratio α_t²/σ_t²; strictly decreasing in t.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let (a, s) = self.alpha_sigma(t)?;
        Ok(a * a / (s * s))
    }

    /// The noise level at time t.
    pub fn sigma_of_t(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.1)
    }

    /// Inverse of [`sigma_of_t`](Self::sigma_of_t): the time with noise
    /// level `sigma`.
    pub fn t_of_sigma(&self, sigma: f64) -> Result<f64> {
        match *self {
            NoiseSchedule::Ve { .. } => {
                let top = self.t_max();
                ensure!(
                    sigma > 0.0 && sigma <= top * (1.0 + 1e-12),
                    "sigma {sigma} outside the ve range"
                );
                Ok(sigma.min(top))
            }
            NoiseSchedule::Vp {
                sigma2_min,
                sigma2_max,
                t_max,
            } => {
                let s2 = sigma * sigma;
                let tol = 1e-12 * sigma2_max;
                ensure!(
                    s2 >= sigma2_min - tol && s2 <= sigma2_max + tol,
                    "sigma^2 {s2} outside the vp range [{sigma2_min}, {sigma2_max}]"
                );
                let s2 = s2.clamp(sigma2_min, sigma2_max);
                Ok(t_max * (s2 - sigma2_min) / (sigma2_max - sigma2_min))
            }
        }
    }

    /// Power-law grid of `n` strictly decreasing times from `t_hi` to `t_lo`:
    /// the σ^(1/ρ) values are equally spaced between the endpoint noise
    /// levels, then mapped back to times.
    pub fn edm_grid(&self, n: usize, t_lo: f64, t_hi: f64, rho: f64) -> Result<TimeGrid> {
        ensure!(n >= 2, "grid needs at least 2 points, got {n}");
        ensure!(rho > 0.0, "rho must be positive, got {rho}");
        self.check_t(t_hi)?;
        ensure!(
            t_lo > 0.0 && t_lo < t_hi,
            "grid bounds must satisfy 0 < t_lo < t_hi, got [{t_lo}, {t_hi}]"
        );
        let s_hi = self.sigma_of_t(t_hi)?.powf(1.0 / rho);
        let s_lo = self.sigma_of_t(t_lo)?.powf(1.0 / rho);
        let mut points = Vec::with_capacity(n);
        points.push(t_hi);
        for i in 1..n - 1 {
            let frac = i as f64 / (n - 1) as f64;
            let sigma = (s_hi + frac * (s_lo - s_hi)).powf(rho);
            points.push(self.t_of_sigma(sigma)?);
        }
        points.push(t_lo);
        Ok(TimeGrid { points, rho })
    }
}

/// Strictly decreasing times in (0, T], built by [`NoiseSchedule::edm_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    rho: f64,
}

impl TimeGrid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Consecutive (t, s) transition pairs with t > s.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ve_alpha_sigma_identity() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        let (a, s) = sched.alpha_sigma(50.0).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(s, 50.0);
        let (a, s) = sched.alpha_sigma(0.7).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(s, 0.7);
    }

    #[test]
    fn ve_rejects_out_of_range_times() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        assert!(sched.alpha_sigma(0.0).is_err());
        assert!(sched.alpha_sigma(50.1).is_err());
        assert!(sched.alpha_sigma(f64::NAN).is_err());
    }

    #[test]
    fn vp_alpha_from_sigma2() {
        // σ²(t) hits 0.19 at a known t; α must be sqrt(0.81) = 0.9 there.
        let sched = NoiseSchedule::vp(1e-4, 0.999, 1000.0).unwrap();
        let t = sched.t_of_sigma(0.19f64.sqrt()).unwrap();
        let (a, s) = sched.alpha_sigma(t).unwrap();
        assert!((s * s - 0.19).abs() < 1e-12);
        assert!((a - 0.9).abs() < 1e-12);
    }

    #[test]
    fn vp_identity_on_grid() {
        let sched = NoiseSchedule::vp_default();
        let grid = sched
            .edm_grid(200, sched.t_floor(), sched.t_max(), DEFAULT_RHO)
            .unwrap();
        for &t in grid.points() {
            let (a, s) = sched.alpha_sigma(t).unwrap();
            assert!((a * a + s * s - 1.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn vp_low_noise_limit() {
        let sched = NoiseSchedule::vp(1e-10, 0.999, 1000.0).unwrap();
        let (a, _) = sched.alpha_sigma(1e-9).unwrap();
        assert!((a - 1.0).abs() < 1e-9);
    }

    #[test]
    fn snr_values_and_monotonicity() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        assert!((sched.snr(2.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((sched.snr(2f64.sqrt()).unwrap() - 0.5).abs() < 1e-15);
        assert!(sched.snr(2f64.sqrt()).unwrap() > sched.snr(2.0).unwrap());
    }

    #[test]
    fn t_of_sigma_round_trip() {
        for sched in [
            NoiseSchedule::ve(0.002, 50.0).unwrap(),
            NoiseSchedule::vp_default(),
        ] {
            let grid = sched
                .edm_grid(50, sched.t_floor(), sched.t_max(), 3.0)
                .unwrap();
            for &t in grid.points() {
                let s = sched.sigma_of_t(t).unwrap();
                assert!((sched.t_of_sigma(s).unwrap() - t).abs() < 1e-9 * sched.t_max());
            }
        }
    }

    #[test]
    fn grid_two_points_is_exactly_the_endpoints() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        let grid = sched.edm_grid(2, 1.5, 2.2, DEFAULT_RHO).unwrap();
        assert_eq!(grid.points(), &[2.2, 1.5]);
    }

    #[test]
    fn grid_rho_one_is_equally_spaced_in_sigma() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        let grid = sched.edm_grid(11, 1.0, 3.0, 1.0).unwrap();
        let sigmas: Vec<f64> = grid
            .points()
            .iter()
            .map(|&t| sched.sigma_of_t(t).unwrap())
            .collect();
        for w in sigmas.windows(2) {
            assert!((w[0] - w[1] - 0.2).abs() < 1e-12);
        }
    }

    /// Frozen values of the 10-point ρ=7 grid on the full VE range,
    /// σ_i = (σ_hi^(1/ρ) + (i/9)(σ_lo^(1/ρ) − σ_hi^(1/ρ)))^ρ.
    #[test]
    fn grid_regression_fixture() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        let grid = sched.edm_grid(10, 0.002, 50.0, 7.0).unwrap();
        let expected = [
            50.0,
            26.856449574261703,
            13.57704735266824,
            6.375970896823711,
            2.7321439603889233,
            1.0415654194409616,
            0.3402587128562077,
            0.0897894327519733,
            0.017298705021883617,
            0.002,
        ];
        assert_eq!(grid.len(), expected.len());
        for (got, want) in grid.points().iter().zip(expected) {
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1.0),
                "got {got}, want {want}"
            );
        }
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        let sched = NoiseSchedule::ve(0.002, 50.0).unwrap();
        assert!(sched.edm_grid(1, 1.0, 2.0, 7.0).is_err());
        assert!(sched.edm_grid(10, 2.0, 1.0, 7.0).is_err());
        assert!(sched.edm_grid(10, 1.0, 51.0, 7.0).is_err());
    }

    proptest! {
        /// SNR is strictly decreasing along every grid, and grid endpoints
        /// match the requested bounds exactly, for both schedule kinds.
        #[test]
        fn snr_decreases_along_grids(
            lo_frac in 1e-3f64..0.4,
            hi_frac in 0.5f64..1.0,
            rho in 1.0f64..9.0,
            n in 3usize..40,
            vp in proptest::bool::ANY,
        ) {
            let sched = if vp {
                NoiseSchedule::vp_default()
            } else {
                NoiseSchedule::ve(0.002, 50.0).unwrap()
            };
            let t_lo = sched.t_max() * lo_frac;
            let t_hi = sched.t_max() * hi_frac;
            prop_assume!(t_lo < t_hi);
            let grid = sched.edm_grid(n, t_lo, t_hi, rho).unwrap();
            prop_assert_eq!(grid.points()[0], t_hi);
            prop_assert_eq!(grid.points()[n - 1], t_lo);
            for (t, s) in grid.pairs() {
                prop_assert!(t > s);
                prop_assert!(sched.snr(t).unwrap() < sched.snr(s).unwrap());
            }
        }
    }
}
