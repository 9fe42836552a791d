//! Error metrics for the benchmark harness.

use crate::error::{Error, Result};

/// Root mean square of `errors`.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidParameter("rmse of an empty list".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Empirical CDF with the step-at-sample convention: returns the sorted
/// errors and the cumulative fraction at each of them (the last is exactly 1).
pub fn ecdf(errors: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if errors.is_empty() {
        return Err(Error::InvalidParameter("ecdf of an empty list".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = sorted.len() as f64;
    let fractions = (1..=sorted.len()).map(|i| i as f64 / n).collect();
    Ok((sorted, fractions))
}

/// Median with the usual midpoint convention for even counts.
pub fn median(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidParameter("median of an empty list".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Nearest-rank percentile, `p` in (0, 1].
pub fn percentile(errors: &[f64], p: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidParameter("percentile of an empty list".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("percentile {p} outside (0, 1]")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}
