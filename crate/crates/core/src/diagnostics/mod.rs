//! Divergence of the learned field, correlation statistics, and the
//! probe-count sweep of the stochastic trace estimator.

pub mod flop_model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::Closure;
use crate::numerics::{flops, Matrix, RngStream};
use crate::par::{try_map_chunks, CHUNK_ROWS};
use crate::sampler::{integrate, sample_streams, Controller, MapField, TrajectoryRecord, VelocityField};
use crate::vad::VadPosterior;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DivergenceMethod {
    FdExact,
    Hutchinson { probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub method: DivergenceMethod,
    /// Field evaluations (rows) spent.
    pub evaluations: usize,
    pub flops: u64,
}

fn evaluate_mean<F: VelocityField + ?Sized>(field: &F, x: &Matrix, times: &[f64]) -> Result<Matrix> {
    // Divergence is taken of the mean field; no stream is consumed.
    let mut rngs = vec![RngStream::new(0, "unused"); x.rows()];
    Ok(field.evaluate(x, times, &mut rngs)?.0)
}

/// Central-difference divergence `sum_d [v_d(x + h e_d) - v_d(x - h e_d)] / 2h`.
pub fn divergence_fd<F: VelocityField + ?Sized>(field: &F, x: &[f64], t: f64, h: f64) -> Result<DivergenceEstimate> {
    let (value, flops) = flops::measure(|| -> Result<f64> {
        let pts = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(divergence_fd_batch(field, &pts, &[t], h)?[0])
    });
    Ok(DivergenceEstimate {
        value: value?,
        method: DivergenceMethod::FdExact,
        evaluations: 2 * x.len(),
        flops,
    })
}

/// [`divergence_fd`] at every row of `points`, one batched field call.
pub fn divergence_fd_batch<F: VelocityField + ?Sized>(
    field: &F,
    points: &Matrix,
    times: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let (n, d) = points.shape();
    if field.dim() != d || times.len() != n {
        return Err(Error::shape("divergence points", field.dim(), d));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h}")));
    }
    let mut shifted = Matrix::zeros(2 * d * n, d);
    let mut tt = vec![0.0; 2 * d * n];
    for p in 0..n {
        for k in 0..d {
            for (s, sign) in [(0, 1.0), (1, -1.0)] {
                let r = (p * d + k) * 2 + s;
                shifted.row_mut(r).copy_from_slice(points.row(p));
                shifted.row_mut(r)[k] += sign * h;
                tt[r] = times[p];
            }
        }
    }
    flops::charge((2 * d * n) as u64);
    let v = evaluate_mean(field, &shifted, &tt)?;
    flops::charge((3 * d * n) as u64);
    Ok((0..n)
        .map(|p| {
            (0..d)
                .map(|k| {
                    let r = (p * d + k) * 2;
                    (v.get(r, k) - v.get(r + 1, k)) / (2.0 * h)
                })
                .sum()
        })
        .collect())
}

/// Rademacher-probe trace estimate `(1/K) sum_k eps_k^T [v(x + h eps_k) - v(x - h eps_k)] / 2h`.
pub fn divergence_hutchinson<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    probes: usize,
    rng: &mut RngStream,
    h: f64,
) -> Result<DivergenceEstimate> {
    let (value, flops) = flops::measure(|| -> Result<f64> {
        let pts = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let mut rngs = [rng.clone()];
        let out = hutchinson_batch(field, &pts, &[t], probes, &mut rngs, h)?;
        *rng = rngs[0].clone();
        Ok(out[0])
    });
    Ok(DivergenceEstimate {
        value: value?,
        method: DivergenceMethod::Hutchinson { probes },
        evaluations: 2 * probes,
        flops,
    })
}

/// Hutchinson estimates at every row of `points`; point `p` draws its
/// Point `p` draws its probes from `rngs[p]`.
pub fn hutchinson_batch<F: VelocityField + ?Sized>(
    field: &F,
    points: &Matrix,
    times: &[f64],
    probes: usize,
    rngs: &mut [RngStream],
    h: f64,
) -> Result<Vec<f64>> {
    let (n, d) = points.shape();
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    if rngs.len() != n || times.len() != n || field.dim() != d {
        return Err(Error::shape("hutchinson points", n, rngs.len()));
    }
    let mut eps = Matrix::zeros(n * probes, d);
    for p in 0..n {
        for k in 0..probes {
            for v in eps.row_mut(p * probes + k) {
                *v = rngs[p].rademacher();
            }
        }
    }
    // Evaluate in bounded blocks of probes so memory stays flat at large K.
    let per_block = (4 * CHUNK_ROWS / 2).max(1);
    let totals = try_map_chunks(n * probes, per_block, |_, start, end| -> Result<Vec<(usize, f64)>> {
        let rows = end - start;
        let mut shifted = Matrix::zeros(2 * rows, d);
        let mut tt = vec![0.0; 2 * rows];
        for j in 0..rows {
            let g = start + j;
            let p = g / probes;
            let e = eps.row(g);
            for (s, sign) in [(0, 1.0), (1, -1.0)] {
                let r = 2 * j + s;
                let row = shifted.row_mut(r);
                for c in 0..d {
                    row[c] = points.get(p, c) + sign * h * e[c];
                }
                tt[r] = times[p];
            }
        }
        flops::charge((4 * d * rows) as u64);
        let v = evaluate_mean(field, &shifted, &tt)?;
        flops::charge(((3 * d + 1) * rows) as u64);
        Ok((0..rows)
            .map(|j| {
                let g = start + j;
                let e = eps.row(g);
                let q: f64 = (0..d).map(|c| e[c] * (v.get(2 * j, c) - v.get(2 * j + 1, c))).sum();
                (g / probes, q / (2.0 * h))
            })
            .collect())
    })?;
    let mut sums = vec![0.0; n];
    for (p, q) in totals.into_iter().flatten() {
        sums[p] += q;
    }
    flops::charge(n as u64);
    Ok(sums.into_iter().map(|s| s / probes as f64).collect())
}

/// Pearson and Spearman (average ranks on ties) correlation.
pub fn correlations(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("correlations", a.len(), b.len()));
    }
    Ok((pearson(a, b)?, pearson(&ranks(a), &ranks(b))?))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            out[i] = avg;
        }
        k = e + 1;
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, s)
}

/// Variance-versus-divergence agreement over a set of trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCorrelation {
    pub trajectories: usize,
    pub steps: usize,
    pub per_step_pearson_mean: f64,
    pub per_step_pearson_std: f64,
    pub per_step_spearman_mean: f64,
    pub per_step_spearman_std: f64,
    pub integrated_pearson: f64,
    pub integrated_spearman: f64,
    /// Grid times where either series was constant across samples.
    pub degenerate_steps: usize,
    pub degenerate: bool,
}

/// Per-step `||sigma_t^2||` and `|div v|` for every record, `n x N`.
pub fn variance_and_divergence<F: VelocityField + ?Sized>(
    field: &F,
    records: &[TrajectoryRecord],
    h: f64,
) -> Result<(Matrix, Matrix)> {
    let n = records.len();
    let steps = records.first().map_or(0, |r| r.len());
    if records.iter().any(|r| r.len() != steps) {
        return Err(Error::InvalidArgument("records have different step counts".into()));
    }
    let dim = field.dim();
    let mut pts = Matrix::zeros(n * steps, dim);
    let mut tt = vec![0.0; n * steps];
    let mut var = Matrix::zeros(n, steps);
    for (s, rec) in records.iter().enumerate() {
        for i in 0..steps {
            pts.row_mut(s * steps + i).copy_from_slice(rec.state(i));
            tt[s * steps + i] = rec.times[i];
            var.set(s, i, rec.var_norm(i));
        }
    }
    let div = try_map_chunks(n * steps, CHUNK_ROWS, |_, a, b| {
        divergence_fd_batch(field, &pts.slice_rows(a, b), &tt[a..b], h)
    })?;
    let div: Vec<f64> = div.into_iter().flatten().map(f64::abs).collect();
    Ok((var, Matrix::from_vec(n, steps, div)?))
}

/// Correlation between `||sigma_t^2||` and `|div v|` along MAP
/// trajectories, per grid time and for the trajectory sums.
pub fn divergence_correlation_report(
    posterior: &VadPosterior,
    n_samples: usize,
    n_steps: usize,
    closure: Closure,
    rng: &RngStream,
) -> Result<DivergenceCorrelation> {
    let mut x0 = Matrix::zeros(n_samples, posterior.config().data_dim);
    rng.derive("x0").fill_normal(x0.as_mut_slice());
    let field = MapField::new(posterior, closure);
    let streams = sample_streams(rng, 0, n_samples);
    let records = integrate(&field, &x0, n_steps, Controller::Uniform, &streams)?;
    let (var, div) = variance_and_divergence(&field, &records, FD_STEP)?;
    correlation_from_series(&var, &div)
}

/// Builds the report from `n x N` variance and divergence tables.
pub fn correlation_from_series(var: &Matrix, div: &Matrix) -> Result<DivergenceCorrelation> {
    let (n, steps) = var.shape();
    let mut pr = Vec::new();
    let mut sr = Vec::new();
    let mut degenerate_steps = 0;
    for i in 0..steps {
        let a: Vec<f64> = (0..n).map(|s| var.get(s, i)).collect();
        let b: Vec<f64> = (0..n).map(|s| div.get(s, i)).collect();
        match correlations(&a, &b) {
            Ok((p, r)) => {
                pr.push(p);
                sr.push(r);
            }
            Err(Error::Degenerate(_)) => degenerate_steps += 1,
            Err(e) => return Err(e),
        }
    }
    let sum_rows = |m: &Matrix| -> Vec<f64> { (0..n).map(|s| m.row(s).iter().sum()).collect() };
    let integrated = correlations(&sum_rows(var), &sum_rows(div));
    let (ip, is, degenerate) = match integrated {
        Ok((p, r)) => (p, r, false),
        Err(Error::Degenerate(_)) => (f64::NAN, f64::NAN, true),
        Err(e) => return Err(e),
    };
    let (pm, ps) = mean_std(&pr);
    let (sm, ss) = mean_std(&sr);
    Ok(DivergenceCorrelation {
        trajectories: n,
        steps,
        per_step_pearson_mean: pm,
        per_step_pearson_std: ps,
        per_step_spearman_mean: sm,
        per_step_spearman_std: ss,
        integrated_pearson: ip,
        integrated_spearman: is,
        degenerate_steps,
        degenerate: degenerate || degenerate_steps == steps,
    })
}

/// One row of the probe-count sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub probes: usize,
    pub pearson: f64,
    pub spearman: f64,
    /// Field evaluations per point.
    pub evaluations: usize,
    /// Measured flops per point.
    pub flops: f64,
    pub flops_ratio_vs_fmwc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: usize,
    pub reference_probes: usize,
    pub rows: Vec<SweepRow>,
    /// Rank agreement of the single-pass variance norm with the reference.
    pub fmwc_spearman: f64,
    pub fmwc_pearson: f64,
    /// Measured flops of one moment pass per point.
    pub fmwc_flops: f64,
    /// Smallest swept probe count whose Spearman reaches `fmwc_spearman`.
    pub crossover_probes: Option<usize>,
}

/// Correlation of K-probe estimates with a high-K reference at points
/// sampled along MAP trajectories. Estimates for every K reuse a prefix of
/// one probe sequence per point; the reference uses an independent stream.
pub fn flops_sweep(
    posterior: &VadPosterior,
    probe_counts: &[usize],
    reference_probes: usize,
    n_points: usize,
    n_steps: usize,
    closure: Closure,
    rng: &RngStream,
) -> Result<SweepReport> {
    let field = MapField::new(posterior, closure);
    let dim = posterior.config().data_dim;
    let mut x0 = Matrix::zeros(n_points, dim);
    rng.derive("sweep-x0").fill_normal(x0.as_mut_slice());
    let streams = sample_streams(&rng.derive("sweep-traj"), 0, n_points);
    let records = integrate(&field, &x0, n_steps, Controller::Uniform, &streams)?;
    let mut pick = rng.derive("sweep-step");
    let mut pts = Matrix::zeros(n_points, dim);
    let mut times = vec![0.0; n_points];
    let mut var_norm = vec![0.0; n_points];
    for (p, rec) in records.iter().enumerate() {
        let i = pick.below(rec.len());
        pts.row_mut(p).copy_from_slice(rec.state(i));
        times[p] = rec.times[i];
        var_norm[p] = rec.var_norm(i);
    }
    let mut ref_rngs = sample_streams(&rng.derive("sweep-reference"), 0, n_points);
    let reference: Vec<f64> = hutchinson_batch(&field, &pts, &times, reference_probes, &mut ref_rngs, FD_STEP)?
        .into_iter()
        .map(f64::abs)
        .collect();
    let (fmwc_pearson, fmwc_spearman) = correlations(&var_norm, &reference)?;
    let (_, fmwc_flops) = flops::measure(|| MapField::new(posterior, closure).evaluate(&pts, &times, &mut []));
    let fmwc_flops = fmwc_flops as f64 / n_points as f64;

    let probe_base = rng.derive("sweep-probes");
    let mut rows = Vec::new();
    for &k in probe_counts {
        let mut rngs = sample_streams(&probe_base, 0, n_points);
        let (est, f) = flops::measure(|| hutchinson_batch(&field, &pts, &times, k, &mut rngs, FD_STEP));
        let est: Vec<f64> = est?.into_iter().map(f64::abs).collect();
        let (pearson, spearman) = correlations(&est, &reference).unwrap_or((f64::NAN, f64::NAN));
        let per_point = f as f64 / n_points as f64;
        rows.push(SweepRow {
            probes: k,
            pearson,
            spearman,
            evaluations: 2 * k,
            flops: per_point,
            flops_ratio_vs_fmwc: per_point / fmwc_flops,
        });
    }
    let crossover_probes = rows.iter().find(|r| r.spearman >= fmwc_spearman).map(|r| r.probes);
    Ok(SweepReport {
        points: n_points,
        reference_probes,
        rows,
        fmwc_spearman,
        fmwc_pearson,
        fmwc_flops,
        crossover_probes,
    })
}
