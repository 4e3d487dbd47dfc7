//! Median scaling and the standard depth-evaluation indicators. Everything
//! is computed in `f64`.

use serde::{Deserialize, Serialize};

use crate::datasets::DepthMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub silog: f64,
    pub n_pixels: usize,
}

impl MetricReport {
    pub const NAMES: [&'static str; 9] = [
        "delta1", "delta2", "delta3", "abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "silog",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.delta1,
            self.delta2,
            self.delta3,
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.silog,
        ]
    }

    fn from_values(v: [f64; 9], n_pixels: usize) -> Self {
        Self {
            delta1: v[0],
            delta2: v[1],
            delta3: v[2],
            abs_rel: v[3],
            sq_rel: v[4],
            rmse: v[5],
            rmse_log: v[6],
            log10: v[7],
            silog: v[8],
            n_pixels,
        }
    }

    /// Largest absolute difference over the nine metrics.
    pub fn max_abs_diff(&self, other: &MetricReport) -> f64 {
        self.values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Mean and sample standard deviation of each metric over a set of reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricReport,
    pub std: MetricReport,
    pub count: usize,
}

/// Aggregate per-image reports. Standard deviation uses the `n - 1`
/// denominator and is 0 for a single report.
pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidData("no metric reports to summarize".into()));
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 9];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 9];
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in std.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m).powi(2) / (n - 1.0);
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
    }
    let pixels = reports.iter().map(|r| r.n_pixels).sum();
    Ok(MetricSummary {
        mean: MetricReport::from_values(mean, pixels),
        std: MetricReport::from_values(std, pixels),
        count: reports.len(),
    })
}

/// Median with the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidData("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidData("empty depth maps".into()));
    }
    if let Some(v) = pred.iter().chain(gt).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidData(format!("depth value {v} is not strictly positive")));
    }
    Ok(())
}

/// `scale = median(gt) / median(pred)`; returns `(pred * scale, scale)`.
pub fn median_scale_values(pred: &[f64], gt: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_pair(pred, gt)?;
    let scale = median(gt)? / median(pred)?;
    Ok((pred.iter().map(|p| p * scale).collect(), scale))
}

pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, f64)> {
    let (p, g) = (to_f64(pred), to_f64(gt));
    let (scaled, scale) = median_scale_values(&p, &g)?;
    let data = scaled.iter().map(|&v| v as f32).collect();
    Ok((DepthMap::new(pred.height(), pred.width(), data, pred.d_max())?, scale))
}

fn to_f64(d: &DepthMap) -> Vec<f64> {
    d.data().iter().map(|&v| v as f64).collect()
}

/// The nine indicators on flat pixel buffers.
pub fn compute_metrics_values(pred: &[f64], gt: &[f64], median_scaling: bool) -> Result<MetricReport> {
    check_pair(pred, gt)?;
    let scaled;
    let pred = if median_scaling {
        scaled = median_scale_values(pred, gt)?.0;
        &scaled[..]
    } else {
        pred
    };
    let n = pred.len() as f64;
    let mut acc = [0.0f64; 9];
    let (mut sum_l, mut sum_l2) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let ratio = (p / g).max(g / p);
        for (k, a) in acc[..3].iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *a += 1.0;
            }
        }
        let diff = p - g;
        acc[3] += diff.abs() / g;
        acc[4] += diff * diff / g;
        acc[5] += diff * diff;
        let l = p.ln() - g.ln();
        sum_l += l;
        sum_l2 += l * l;
        acc[7] += (p.log10() - g.log10()).abs();
    }
    let mean_l = sum_l / n;
    let mean_l2 = sum_l2 / n;
    let report = [
        acc[0] / n,
        acc[1] / n,
        acc[2] / n,
        acc[3] / n,
        acc[4] / n,
        (acc[5] / n).sqrt(),
        mean_l2.sqrt(),
        acc[7] / n,
        // rounding can push the variance a hair below zero
        100.0 * (mean_l2 - mean_l * mean_l).max(0.0).sqrt(),
    ];
    Ok(MetricReport::from_values(report, pred.len()))
}

pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, median_scaling: bool) -> Result<MetricReport> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    compute_metrics_values(&to_f64(pred), &to_f64(gt), median_scaling)
}
