use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn standard() -> Normal {
    Normal::standard()
}

/// Standard normal quantile Φ⁻¹(p) for `p` in the open unit interval.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("inverse normal CDF needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    Ok(standard().inverse_cdf(p))
}

/// Standard normal CDF Φ(x).
pub fn normal_cdf(x: f64) -> f64 {
    standard().cdf(x)
}
