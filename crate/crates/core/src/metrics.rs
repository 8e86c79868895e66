//! Scores for sample sets: mode coverage against an exact posterior,
//! moment errors, energy distance between sample sets, and consistency
//! with the observation.

use crate::error::{ensure, ensure_len, Result};
use crate::gmm::GmmPosterior;
use crate::operators::MeasurementOp;
use crate::util::dist;

/// Assign each sample to its maximum-responsibility component of `truth`;
/// return the empirical component frequencies and the total-variation
/// distance to the truth's weights.
pub fn mode_coverage(samples: &[Vec<f64>], truth: &GmmPosterior) -> Result<(Vec<f64>, f64)> {
    ensure!(!samples.is_empty(), "need at least one sample");
    let k = truth.n_components();
    let mut counts = vec![0usize; k];
    for s in samples {
        counts[truth.map_component(s)?] += 1;
    }
    let n = samples.len() as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let tv = 0.5
        * freqs
            .iter()
            .zip(truth.weights())
            .map(|(f, w)| (f - w).abs())
            .sum::<f64>();
    Ok((freqs, tv))
}

/// Euclidean error of the sample mean and Frobenius error of the sample
/// covariance against the truth's closed-form mixture moments.
pub fn moment_error(samples: &[Vec<f64>], truth: &GmmPosterior) -> Result<(f64, f64)> {
    ensure!(!samples.is_empty(), "need at least one sample");
    let d = truth.dim();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        ensure_len!("sample", d, s.len());
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / n;
            }
        }
    }
    let (tm, tc) = truth.mixture_moments();
    let mean_err = dist(&mean, &tm);
    let mut cov_err = 0.0;
    for i in 0..d {
        for j in 0..d {
            let diff = cov[i][j] - tc[i][j];
            cov_err += diff * diff;
        }
    }
    Ok((mean_err, cov_err.sqrt()))
}

fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += dist(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Energy distance 2·E‖A−B‖ − E‖A−A′‖ − E‖B−B′‖ between two sample sets,
/// estimated over all pairs (including self-pairs), which keeps the value
/// nonnegative and exactly zero for identical sets.
pub fn energy_distance(samples_a: &[Vec<f64>], samples_b: &[Vec<f64>]) -> Result<f64> {
    ensure!(
        !samples_a.is_empty() && !samples_b.is_empty(),
        "need at least one sample on each side"
    );
    let d = samples_a[0].len();
    for s in samples_a.iter().chain(samples_b) {
        ensure_len!("sample", d, s.len());
    }
    let cross = mean_pairwise(samples_a, samples_b);
    let within_a = mean_pairwise(samples_a, samples_a);
    let within_b = mean_pairwise(samples_b, samples_b);
    Ok((2.0 * cross - within_a - within_b).max(0.0))
}

/// Mean over samples of ‖y − f(x)‖² / dim(y).
pub fn observed_mse(samples: &[Vec<f64>], op: &MeasurementOp, y: &[f64]) -> Result<f64> {
    ensure!(!samples.is_empty(), "need at least one sample");
    let mut total = 0.0;
    for s in samples {
        let fx = op.apply(s)?;
        ensure_len!("observation", fx.len(), y.len());
        total += y
            .iter()
            .zip(&fx)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / (samples.len() * y.len()) as f64)
}
