use crate::error::{Error, Result};

/// Squared quadratic Wasserstein distance between two equal-size empirical
/// measures on the line: the mean squared gap between order statistics.
pub fn wasserstein2_squared_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("samples must be non-empty".into()));
    }
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "sample sizes differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// Quadratic Wasserstein distance between equal-size 1-D samples.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    wasserstein2_squared_1d(a, b).map(f64::sqrt)
}
