//! Standard normal distribution helpers.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1), got {p}");
    // Newton polish of the statrs inverse so that cdf(quantile(p)) == p to
    // machine precision
    let mut z = Normal::standard().inverse_cdf(p);
    for _ in 0..2 {
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density <= 0.0 {
            break;
        }
        z -= (cdf(z) - p) / density;
    }
    z
}

/// Two-sided critical value `z_{(1 + level)/2}`.
pub fn two_sided_multiplier(level: f64) -> f64 {
    quantile(0.5 * (1.0 + level))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplier_95() {
        assert!((two_sided_multiplier(0.95) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-6, 0.01, 0.2, 0.5, 0.77, 0.999] {
            assert!((cdf(quantile(p)) - p).abs() < 1e-12 * p.max(1e-3));
        }
        assert_eq!(quantile(0.5), 0.0);
    }
}
