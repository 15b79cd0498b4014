//! Thin wrappers around the standard normal distribution used across the
//! crate (region probabilities, confidence intervals, calibration checks).

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

/// Φ(x), the standard normal CDF.
pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    standard().cdf(x)
}

/// Φ⁻¹(p) for `p` in (0, 1).
pub(crate) fn std_normal_quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

/// φ(x), the standard normal density. Only exercised by oracle tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    standard().pdf(x)
}
