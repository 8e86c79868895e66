//! Small numeric helpers shared across modules.

pub const LN_2PI: f64 = 1.8378770664093453;

/// log Σ exp(x_i), stable under large magnitudes.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Euclidean distance between equal-length vectors.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Log density of N(x; mean, var) in one dimension.
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (r * r / var + var.ln() + LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [0.1f64, -0.3, 2.0];
        let direct: f64 = xs.iter().map(|x| f64::exp(*x)).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_survives_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert!((logsumexp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn normal_log_pdf_standard_value() {
        // N(0; 0, 1) = 1/sqrt(2π).
        assert!((normal_log_pdf(0.0, 0.0, 1.0) + 0.5 * LN_2PI).abs() < 1e-15);
    }
}
