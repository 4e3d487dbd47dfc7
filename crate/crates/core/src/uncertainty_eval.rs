//! Sparsification curves: RMSE of the pixels that remain after removing the
//! highest-ranked fraction, for an uncertainty ranking and for the oracle
//! ranking by true error.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationCurve {
    pub fractions: Vec<f64>,
    pub rmse_values: Vec<f64>,
}

/// `0.00, 0.02, ..., 0.98`.
pub fn default_fractions() -> Vec<f64> {
    (0..50).map(|i| i as f64 * 0.02).collect()
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.first() != Some(&0.0) {
        return Err(Error::InvalidData("fractions must start at 0".into()));
    }
    if fractions.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidData("fractions must be strictly increasing".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f < 1.0)) {
        return Err(Error::InvalidData(format!(
            "fraction {f} would leave no pixels"
        )));
    }
    Ok(())
}

/// Pixel indices in removal order: descending score, lower index first on ties.
fn removal_order(ranking: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ranking.len()).collect();
    idx.sort_by(|&a, &b| match ranking[b].total_cmp(&ranking[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// For each fraction `f`, drop the `floor(f * n)` pixels with the highest
/// `ranking` and report the RMSE of the remaining `errors`.
pub fn sparsification_curve(errors: &[f64], ranking: &[f64], fractions: &[f64]) -> Result<SparsificationCurve> {
    if errors.len() != ranking.len() {
        return Err(Error::Shape(format!(
            "{} errors vs {} ranking scores",
            errors.len(),
            ranking.len()
        )));
    }
    if errors.is_empty() {
        return Err(Error::InvalidData("empty error field".into()));
    }
    check_fractions(fractions)?;
    let order = removal_order(ranking);
    let n = errors.len();
    // suffix sums of squared error in removal order: tail[k] = sum over order[k..]
    let mut tail = vec![0.0f64; n + 1];
    for k in (0..n).rev() {
        tail[k] = tail[k + 1] + errors[order[k]].powi(2);
    }
    let rmse_values = fractions
        .iter()
        .map(|f| {
            let removed = (f * n as f64).floor() as usize;
            (tail[removed] / (n - removed) as f64).sqrt()
        })
        .collect();
    Ok(SparsificationCurve {
        fractions: fractions.to_vec(),
        rmse_values,
    })
}

/// Sparsification by the true error itself.
pub fn oracle_curve(errors: &[f64], fractions: &[f64]) -> Result<SparsificationCurve> {
    sparsification_curve(errors, errors, fractions)
}

/// Pointwise `curve - oracle` and its trapezoidal integral over the fractions
/// (signed).
pub fn sparsification_error(curve: &SparsificationCurve, oracle: &SparsificationCurve) -> Result<(Vec<f64>, f64)> {
    if curve.fractions != oracle.fractions {
        return Err(Error::InvalidData("curves use different fractions".into()));
    }
    let diff: Vec<f64> = curve
        .rmse_values
        .iter()
        .zip(&oracle.rmse_values)
        .map(|(a, b)| a - b)
        .collect();
    let area = curve
        .fractions
        .windows(2)
        .zip(diff.windows(2))
        .map(|(f, d)| (f[1] - f[0]) * (d[0] + d[1]) / 2.0)
        .sum();
    Ok((diff, area))
}

/// Pointwise mean of per-image curves sharing the same fractions.
pub fn average_curves(curves: &[SparsificationCurve]) -> Result<SparsificationCurve> {
    let Some(first) = curves.first() else {
        return Err(Error::InvalidData("no curves to average".into()));
    };
    if curves.iter().any(|c| c.fractions != first.fractions) {
        return Err(Error::InvalidData("curves use different fractions".into()));
    }
    let n = curves.len() as f64;
    let rmse_values = (0..first.fractions.len())
        .map(|i| curves.iter().map(|c| c.rmse_values[i]).sum::<f64>() / n)
        .collect();
    Ok(SparsificationCurve {
        fractions: first.fractions.clone(),
        rmse_values,
    })
}
