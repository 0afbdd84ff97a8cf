//! Scalar confidence readouts of a variance trajectory.
//!
//! Every score is oriented so that larger means "more likely a sample to
//! discard", so average precision can be computed on the raw values.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{flops, sigmoid, Matrix};
use crate::sampler::TrajectoryRecord;

/// Denominator floor of the temporal ratio.
pub const RATIO_FLOOR: f64 = 1e-12;
/// Resampled length of the head's feature vector.
pub const HEAD_FEATURES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Endpoint,
    Integrated,
    TemporalRatio,
    Learned,
    Dispersion,
    Random,
}

impl Readout {
    pub const ALL: [Readout; 6] = [
        Readout::Endpoint,
        Readout::Integrated,
        Readout::TemporalRatio,
        Readout::Learned,
        Readout::Dispersion,
        Readout::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Readout::Endpoint => "endpoint",
            Readout::Integrated => "integrated",
            Readout::TemporalRatio => "temporal_ratio",
            Readout::Learned => "learned",
            Readout::Dispersion => "dispersion",
            Readout::Random => "random",
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Readout::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown readout '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub sample_id: usize,
    pub readout: Readout,
    pub value: f64,
}

/// Early and late windows of the temporal ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Windows {
    pub early: f64,
    pub late: f64,
}

impl Default for Windows {
    fn default() -> Self {
        Self {
            early: 0.25,
            late: 0.75,
        }
    }
}

/// `||sigma_T||_2` with `sigma_T` the elementwise root of the last
/// recorded variance.
pub fn c_endpoint(record: &TrajectoryRecord) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(record.std_norm(record.len() - 1))
}

/// `sum_i ||sigma_i|| dt_i`.
pub fn c_integrated(record: &TrajectoryRecord) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok((0..record.len()).map(|i| record.std_norm(i) * record.steps[i]).sum())
}

/// Late-window std mass over early-window std mass. A step belongs to a
/// window when its midpoint `t_i + dt_i / 2` lies strictly inside it.
pub fn c_temporal_ratio(record: &TrajectoryRecord, windows: Windows) -> Result<f64> {
    let mut early = 0.0;
    let mut late = 0.0;
    let (mut n_early, mut n_late) = (0, 0);
    for i in 0..record.len() {
        let mid = record.times[i] + 0.5 * record.steps[i];
        if mid < windows.early {
            early += record.std_norm(i);
            n_early += 1;
        } else if mid > windows.late {
            late += record.std_norm(i);
            n_late += 1;
        }
    }
    if n_early == 0 || n_late == 0 {
        return Err(Error::InvalidArgument(format!(
            "temporal windows ({}, {}) are empty on a {}-step grid",
            windows.early,
            windows.late,
            record.len()
        )));
    }
    Ok(late / early.max(RATIO_FLOOR))
}

/// Norm of the per-coordinate sample standard deviation (n - 1
/// normalization) of `k >= 2` endpoints.
pub fn c_dispersion(endpoints: &[&[f64]]) -> Result<f64> {
    let k = endpoints.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "dispersion needs k >= 2 endpoints, got {k}"
        )));
    }
    let dim = endpoints[0].len();
    if endpoints.iter().any(|e| e.len() != dim) {
        return Err(Error::shape("dispersion endpoints", dim, "ragged"));
    }
    let mut total = 0.0;
    for d in 0..dim {
        // shifted by the first endpoint so identical endpoints give exactly 0
        let shift = endpoints[0][d];
        let mean = endpoints.iter().map(|e| e[d] - shift).sum::<f64>() / k as f64;
        total += endpoints.iter().map(|e| (e[d] - shift - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    }
    Ok(total.sqrt())
}

/// Per-step std norms linearly resampled to `len` points over the step
/// index range.
pub fn head_features(record: &TrajectoryRecord, len: usize) -> Vec<f64> {
    let s = record.std_norms();
    resample_linear(&s, len)
}

pub fn resample_linear(s: &[f64], len: usize) -> Vec<f64> {
    let n = s.len();
    if n == 0 {
        return vec![0.0; len];
    }
    if n == 1 || len == 1 {
        return vec![s[0]; len];
    }
    (0..len)
        .map(|k| {
            let u = k as f64 * (n - 1) as f64 / (len - 1) as f64;
            let i = (u.floor() as usize).min(n - 2);
            let w = u - i as f64;
            (1.0 - w) * s[i] + w * s[i + 1]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub l1: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            l1: 1e-3,
            max_iter: 10_000,
            tol: 1e-6,
        }
    }
}

/// L1-regularized logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l1: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticHead {
    pub fn feature_len(&self) -> usize {
        self.weights.len()
    }

    /// `sigmoid(w . standardize(f) + b)`.
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_len() {
            return Err(Error::shape("head features", self.feature_len(), features.len()));
        }
        let z: f64 = features
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(j, (f, w))| w * (f - self.feature_mean[j]) / self.feature_scale[j])
            .sum::<f64>()
            + self.bias;
        Ok(sigmoid(z))
    }
}

/// Fits the head by accelerated proximal gradient. Standardization
/// statistics come from `features` only.
pub fn fit_head(features: &Matrix, labels: &[bool], cfg: &HeadConfig) -> Result<LogisticHead> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::shape("fit_head labels", n, labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::Degenerate("head needs both classes in the labels".into()));
    }
    if !(cfg.l1 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l1 strength {}", cfg.l1)));
    }
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let m = (0..n).map(|r| features.get(r, j)).sum::<f64>() / n as f64;
        let v = (0..n).map(|r| (features.get(r, j) - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        scale[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let x = Matrix::from_fn(n, d, |r, j| (features.get(r, j) - mean[j]) / scale[j]);
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let fro: f64 = x.as_slice().iter().map(|v| v * v).sum();
    let lip = 0.25 * (fro / n as f64 + 1.0);
    let step = 1.0 / lip;

    let grad = |w: &[f64], b: f64, gw: &mut [f64]| -> f64 {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for r in 0..n {
            let row = x.row(r);
            let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            let e = sigmoid(z) - y[r];
            gb += e;
            for (g, a) in gw.iter_mut().zip(row) {
                *g += e * a;
            }
        }
        flops::charge((4 * n * d + 8 * n) as u64);
        gw.iter_mut().for_each(|g| *g /= n as f64);
        gb / n as f64
    };
    let shrink = |v: f64, t: f64| v.signum() * (v.abs() - t).max(0.0);

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut yw = w.clone();
    let mut yb = b;
    let mut tk = 1.0f64;
    let mut gw = vec![0.0; d];
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let gb = grad(&yw, yb, &mut gw);
        let w_new: Vec<f64> = yw
            .iter()
            .zip(&gw)
            .map(|(v, g)| shrink(v - step * g, step * cfg.l1))
            .collect();
        let b_new = yb - step * gb;
        // Gradient mapping at the extrapolated point.
        let gm: f64 = w_new.iter().zip(&yw).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() + (b_new - yb) * (b_new - yb);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let mom = (tk - 1.0) / t_next;
        for j in 0..d {
            yw[j] = w_new[j] + mom * (w_new[j] - w[j]);
        }
        yb = b_new + mom * (b_new - b);
        w = w_new;
        b = b_new;
        tk = t_next;
        if gm.sqrt() * lip <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return Err(Error::NonFinite("logistic head weights".into()));
    }
    Ok(LogisticHead {
        weights: w,
        bias: b,
        l1: cfg.l1,
        feature_mean: mean,
        feature_scale: scale,
        iterations,
        converged,
    })
}

/// Scores a record with the chosen label-free readout.
pub fn score_record(record: &TrajectoryRecord, readout: Readout, windows: Windows) -> Result<f64> {
    match readout {
        Readout::Endpoint => c_endpoint(record),
        Readout::Integrated => c_integrated(record),
        Readout::TemporalRatio => c_temporal_ratio(record, windows),
        other => Err(Error::InvalidArgument(format!(
            "readout {other} is not computed from a single record"
        ))),
    }
}
