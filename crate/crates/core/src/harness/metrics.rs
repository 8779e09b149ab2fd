//! Evaluation metrics: station errors, elevation dependence and event skill.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-variable mean absolute error over present entries (`None` if a
/// variable has no present entry). Inputs are station-major `[S, C]`.
pub fn station_mae(pred: &[f64], truth: &[f64], present: &[bool], channels: usize) -> Result<Vec<Option<f64>>> {
    per_variable(pred, truth, present, channels, |d| d.abs())
        .map(|v| v.into_iter().map(|m| m.map(|(s, n)| s / n as f64)).collect())
}

/// Per-variable root-mean-square error over present entries.
pub fn station_rmse(pred: &[f64], truth: &[f64], present: &[bool], channels: usize) -> Result<Vec<Option<f64>>> {
    per_variable(pred, truth, present, channels, |d| d * d)
        .map(|v| v.into_iter().map(|m| m.map(|(s, n)| (s / n as f64).sqrt())).collect())
}

fn per_variable(
    pred: &[f64],
    truth: &[f64],
    present: &[bool],
    channels: usize,
    f: impl Fn(f64) -> f64,
) -> Result<Vec<Option<(f64, usize)>>> {
    if channels == 0 || pred.len() != truth.len() || pred.len() != present.len() || !pred.len().is_multiple_of(channels)
    {
        return Err(invalid("station metrics: inconsistent lengths"));
    }
    let mut acc = vec![(0.0, 0usize); channels];
    for k in 0..pred.len() {
        if present[k] {
            let a = &mut acc[k % channels];
            a.0 += f(pred[k] - truth[k]);
            a.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(s, n)| (n > 0).then_some((s, n))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElevationBin {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub count: usize,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElevationFit {
    /// Change of bin-mean absolute error per metre of elevation.
    pub slope: f64,
    pub intercept: f64,
    pub bins: Vec<ElevationBin>,
}

/// `n` equal-width bins spanning `[lo, hi]`.
pub fn equal_bins(lo: f64, hi: f64, n: usize) -> Result<Vec<(f64, f64)>> {
    if n == 0 || !(hi > lo) {
        return Err(invalid("equal_bins needs n >= 1 and hi > lo"));
    }
    let w = (hi - lo) / n as f64;
    Ok((0..n).map(|i| (lo + i as f64 * w, if i + 1 == n { hi } else { lo + (i + 1) as f64 * w })).collect())
}

/// Per-bin MAE of `errors` grouped by elevation, and the least-squares slope
/// of bin-mean MAE against bin-centre elevation. Bins are half-open
/// `[lo, hi)` except the last, which is closed.
pub fn elevation_regression(errors: &[f64], elevations: &[f64], bins: &[(f64, f64)]) -> Result<ElevationFit> {
    if errors.len() != elevations.len() {
        return Err(invalid("errors and elevations differ in length"));
    }
    for (i, &(lo, hi)) in bins.iter().enumerate() {
        if !(hi > lo) {
            return Err(invalid(format!("bin {i} is empty or inverted")));
        }
        if i > 0 && lo < bins[i - 1].1 {
            return Err(invalid("bins must be sorted and non-overlapping"));
        }
    }
    let last = bins.len().saturating_sub(1);
    let mut out: Vec<ElevationBin> =
        bins.iter().map(|&(lo, hi)| ElevationBin { lo, hi, center: 0.5 * (lo + hi), count: 0, mae: None }).collect();
    let mut sums = vec![0.0; bins.len()];
    for (&e, &z) in errors.iter().zip(elevations) {
        let hit = bins.iter().enumerate().position(|(i, &(lo, hi))| z >= lo && (z < hi || (i == last && z <= hi)));
        if let Some(b) = hit {
            sums[b] += e.abs();
            out[b].count += 1;
        }
    }
    for (b, s) in out.iter_mut().zip(&sums) {
        if b.count > 0 {
            b.mae = Some(s / b.count as f64);
        }
    }
    let pts: Vec<(f64, f64)> = out.iter().filter_map(|b| b.mae.map(|m| (b.center, m))).collect();
    if pts.len() < 2 {
        return Err(invalid("elevation regression needs at least two populated bins"));
    }
    let (slope, intercept) = ols(&pts);
    Ok(ElevationFit { slope, intercept, bins: out })
}

/// Ordinary least squares `y = intercept + slope·x`.
pub(crate) fn ols(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (slope, my - slope * mx)
}

/// Linear-interpolation percentile (`q` in [0, 100]).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(invalid("percentile needs values and q in [0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Mean filter with an odd square window, truncated at the borders.
pub fn smooth(field: &[f64], rows: usize, cols: usize, window: usize) -> Result<Vec<f64>> {
    if field.len() != rows * cols {
        return Err(invalid("field size does not match its shape"));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(invalid(format!("smoothing window must be odd, got {window}")));
    }
    let r = (window / 2) as isize;
    let mut out = vec![0.0; field.len()];
    for i in 0..rows as isize {
        for j in 0..cols as isize {
            let (mut s, mut n) = (0.0, 0usize);
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0 && b >= 0 && (a as usize) < rows && (b as usize) < cols {
                        s += field[a as usize * cols + b as usize];
                        n += 1;
                    }
                }
            }
            out[i as usize * cols + j as usize] = s / n as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Contingency {
    /// FN / (FN + TP); `None` without observed events.
    pub fn miss_rate(&self) -> Option<f64> {
        let d = self.fn_ + self.tp;
        (d > 0).then(|| self.fn_ as f64 / d as f64)
    }

    /// FP / (FP + TN); `None` without observed non-events.
    pub fn false_alarm_rate(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.fp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSkill {
    pub percentile: f64,
    pub threshold: f64,
    pub table: Contingency,
    pub miss: Option<f64>,
    pub false_alarm: Option<f64>,
}

/// Both fields are mean-smoothed; the threshold is the percentile of the
/// smoothed truth; events are cells at or above it.
pub fn threshold_skill(
    pred: &[f64],
    truth: &[f64],
    rows: usize,
    cols: usize,
    pct: f64,
    smooth_window: usize,
) -> Result<ThresholdSkill> {
    if pred.len() != truth.len() {
        return Err(invalid("prediction and truth differ in size"));
    }
    let ps = smooth(pred, rows, cols, smooth_window)?;
    let ts = smooth(truth, rows, cols, smooth_window)?;
    let thr = percentile(&ts, pct)?;
    let mut table = Contingency { tp: 0, fn_: 0, fp: 0, tn: 0 };
    for (p, t) in ps.iter().zip(&ts) {
        match (*p >= thr, *t >= thr) {
            (true, true) => table.tp += 1,
            (false, true) => table.fn_ += 1,
            (true, false) => table.fp += 1,
            (false, false) => table.tn += 1,
        }
    }
    Ok(ThresholdSkill {
        percentile: pct,
        threshold: thr,
        table,
        miss: table.miss_rate(),
        false_alarm: table.false_alarm_rate(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillEntry {
    pub lead_hours: f64,
    pub percentile: f64,
    pub miss: Option<f64>,
    pub false_alarm: Option<f64>,
}

/// Evaluation summary of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub mae: Vec<Option<f64>>,
    pub rmse: Vec<Option<f64>>,
    pub elevation: Option<ElevationFit>,
    pub skill: Vec<SkillEntry>,
    pub forecast_token_mse: f64,
    pub persistence_token_mse: f64,
    pub windows_evaluated: usize,
}
