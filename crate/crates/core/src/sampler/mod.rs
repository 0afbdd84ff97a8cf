//! Euler integration of a velocity field from `t = 0` to `t = 1` with the
//! per-step velocity variance recorded along the way.

pub mod fields;

use serde::{Deserialize, Serialize};

pub use fields::{DropoutField, FnField, MapField, StochasticField, VelocityField};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::par::{try_map_chunks, CHUNK_ROWS};

/// Tolerance for the `sum dt = 1` and on-grid checks.
pub const GRID_TOL: f64 = 1e-9;

/// One integrated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub dim: usize,
    /// Step start times `t_0 = 0, ..., t_{N-1}`.
    pub times: Vec<f64>,
    /// States at the step start times, `N x dim` row-major.
    pub states: Vec<f64>,
    /// Velocity means, `N x dim`.
    pub mean: Vec<f64>,
    /// Velocity variances, `N x dim`.
    pub var: Vec<f64>,
    pub steps: Vec<f64>,
    pub endpoint: Vec<f64>,
    pub decoder: String,
}

impl TrajectoryRecord {
    fn new(dim: usize, n: usize, decoder: &str) -> Self {
        Self {
            dim,
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n * dim),
            mean: Vec::with_capacity(n * dim),
            var: Vec::with_capacity(n * dim),
            steps: Vec::with_capacity(n),
            endpoint: Vec::new(),
            decoder: decoder.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.mean[i * self.dim..(i + 1) * self.dim]
    }

    pub fn variance(&self, i: usize) -> &[f64] {
        &self.var[i * self.dim..(i + 1) * self.dim]
    }

    /// `||sqrt(sigma_i^2)||_2`, the per-step velocity std norm.
    pub fn std_norm(&self, i: usize) -> f64 {
        self.variance(i).iter().sum::<f64>().sqrt()
    }

    /// `||sigma_i^2||_2`, the per-step variance norm.
    pub fn var_norm(&self, i: usize) -> f64 {
        self.variance(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn std_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.std_norm(i)).collect()
    }

    /// Grid points including the final time.
    pub fn grid(&self) -> Vec<f64> {
        let mut g = self.times.clone();
        g.push(self.times.last().copied().unwrap_or(0.0) + self.steps.last().copied().unwrap_or(0.0));
        g
    }

    /// Checks the record's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        if self.states.len() != n * self.dim
            || self.mean.len() != n * self.dim
            || self.var.len() != n * self.dim
            || self.steps.len() != n
            || self.endpoint.len() != self.dim
        {
            return Err(Error::shape("trajectory arrays", n, "inconsistent lengths"));
        }
        if self.times[0] != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "trajectory starts at {}",
                self.times[0]
            )));
        }
        let total: f64 = self.steps.iter().sum();
        if (total - 1.0).abs() > GRID_TOL {
            return Err(Error::InvalidArgument(format!("steps sum to {total}")));
        }
        if self.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("negative or NaN variance".into()));
        }
        Ok(())
    }

    /// Index of the grid time equal to `t`, where `len()` denotes `t = 1`.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        self.grid()
            .iter()
            .position(|&g| (g - t).abs() <= GRID_TOL)
            .ok_or_else(|| Error::InvalidArgument(format!("time {t} is not on the trajectory grid")))
    }
}

/// Step-size and damping rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    Uniform,
    /// Variance-driven step sizes: `dt = ((1 - t)/K) (sigma_bar/sigma)^b`.
    NaiveEma {
        rate: f64,
        boost: f64,
    },
    /// Uniform grid; late velocity components damped while their std is
    /// above its running mean.
    Online {
        rate: f64,
        late: f64,
        gain: f64,
    },
}

/// Defaults pinned by the acceptance runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub rate: f64,
    pub boost: f64,
    pub late: f64,
    pub gain: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            boost: 1.0,
            late: 0.6,
            gain: 0.5,
        }
    }
}

impl ControllerConfig {
    pub fn naive(&self) -> Controller {
        Controller::NaiveEma {
            rate: self.rate,
            boost: self.boost,
        }
    }

    pub fn online(&self) -> Controller {
        Controller::Online {
            rate: self.rate,
            late: self.late,
            gain: self.gain,
        }
    }
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Uniform => "uniform",
            Controller::NaiveEma { .. } => "naive_ema",
            Controller::Online { .. } => "online",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Controller::Uniform => true,
            Controller::NaiveEma { rate, boost } => rate > 0.0 && rate <= 1.0 && boost >= 0.0,
            Controller::Online { rate, late, gain } => {
                rate > 0.0 && rate <= 1.0 && (0.0..1.0).contains(&late) && gain >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid controller {self:?}")))
        }
    }
}

/// Per-sample controller memory.
#[derive(Clone, Debug)]
struct ControlState {
    ema_norm: f64,
    ema_comp: Vec<f64>,
}

/// Integrates every row of `x0` with `n_steps` field evaluations.
/// Row `r` uses `streams[r]` for any randomness the field needs, so a
/// sample's trajectory does not depend on the batch it was run in.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Matrix,
    n_steps: usize,
    controller: Controller,
    streams: &[RngStream],
) -> Result<Vec<TrajectoryRecord>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    if streams.len() != x0.rows() {
        return Err(Error::shape("integrate streams", x0.rows(), streams.len()));
    }
    if x0.cols() != field.dim() {
        return Err(Error::shape("integrate x0", field.dim(), x0.cols()));
    }
    controller.validate()?;
    let chunks = try_map_chunks(x0.rows(), CHUNK_ROWS, |_, start, end| {
        let mut rngs = streams[start..end].to_vec();
        integrate_chunk(field, &x0.slice_rows(start, end), n_steps, controller, &mut rngs)
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

fn integrate_chunk<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Matrix,
    n_steps: usize,
    controller: Controller,
    rngs: &mut [RngStream],
) -> Result<Vec<TrajectoryRecord>> {
    let rows = x0.rows();
    let dim = x0.cols();
    let mut x = x0.clone();
    let mut t = vec![0.0; rows];
    let mut records: Vec<TrajectoryRecord> = (0..rows)
        .map(|_| TrajectoryRecord::new(dim, n_steps, field.tag()))
        .collect();
    let mut ctl = vec![
        ControlState {
            ema_norm: 0.0,
            ema_comp: vec![0.0; dim],
        };
        rows
    ];
    let dt_min = 1e-2 / n_steps as f64;
    for i in 0..n_steps {
        let (mu, var) = field.evaluate(&x, &t, rngs)?;
        let remaining = (n_steps - i) as f64;
        for r in 0..rows {
            let rem = 1.0 - t[r];
            let mut v = mu.row(r).to_vec();
            let var_r = var.row(r);
            let dt = match controller {
                Controller::Uniform => uniform_step(rem, remaining, i + 1 == n_steps),
                Controller::NaiveEma { rate, boost } => {
                    let sigma = var_r.iter().sum::<f64>().sqrt();
                    let st = &mut ctl[r];
                    if i == 0 {
                        st.ema_norm = sigma;
                    }
                    let dt = if i + 1 == n_steps {
                        rem
                    } else {
                        let ratio = if sigma > 0.0 { st.ema_norm / sigma } else { 1.0 };
                        ((rem / remaining) * ratio.powf(boost)).clamp(dt_min.min(rem), rem)
                    };
                    st.ema_norm += rate * (sigma - st.ema_norm);
                    dt
                }
                Controller::Online { rate, late, gain } => {
                    let st = &mut ctl[r];
                    for c in 0..dim {
                        let sigma = var_r[c].sqrt();
                        if i == 0 {
                            st.ema_comp[c] = sigma;
                        }
                        let bar = st.ema_comp[c];
                        let excess = if bar > 0.0 { (sigma / bar - 1.0).max(0.0) } else { 0.0 };
                        if t[r] >= late {
                            v[c] *= (1.0 - gain * excess).max(0.0);
                        }
                        st.ema_comp[c] += rate * (sigma - bar);
                    }
                    uniform_step(rem, remaining, i + 1 == n_steps)
                }
            };
            let rec = &mut records[r];
            rec.times.push(t[r]);
            rec.states.extend_from_slice(x.row(r));
            rec.mean.extend_from_slice(mu.row(r));
            rec.var.extend_from_slice(var_r);
            rec.steps.push(dt);
            let xr = x.row_mut(r);
            for c in 0..dim {
                xr[c] += dt * v[c];
            }
            if !xr.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("state at step {i}")));
            }
            t[r] += dt;
        }
    }
    for (r, rec) in records.iter_mut().enumerate() {
        rec.endpoint = x.row(r).to_vec();
    }
    Ok(records)
}

/// `(1 - t)/K` with the last step landing exactly on `t = 1`.
#[inline]
fn uniform_step(rem: f64, remaining: f64, last: bool) -> f64 {
    if last {
        rem
    } else {
        rem / remaining
    }
}

/// Fresh per-sample streams `base.fork(first_id + r)`.
pub fn sample_streams(base: &RngStream, first_id: u64, n: usize) -> Vec<RngStream> {
    (0..n as u64).map(|r| base.fork(first_id + r)).collect()
}

/// Endpoints of a batch of records, one row each.
pub fn endpoints(records: &[TrajectoryRecord]) -> Matrix {
    let dim = records.first().map_or(2, |r| r.dim);
    let mut m = Matrix::zeros(records.len(), dim);
    for (r, rec) in records.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&rec.endpoint);
    }
    m
}

/// Grid time maximizing the masked variance norm `||mask * sigma_t^2||`;
/// ties go to the earliest time.
pub fn select_tstar(record: &TrajectoryRecord, mask: &[f64]) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if mask.len() != record.dim {
        return Err(Error::shape("select_tstar mask", record.dim, mask.len()));
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..record.len() {
        let v: f64 = record
            .variance(i)
            .iter()
            .zip(mask)
            .map(|(s, m)| (m * s) * (m * s))
            .sum();
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    Ok(record.times[best])
}

/// Result of re-integrating a perturbed trajectory.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub record: TrajectoryRecord,
    pub displacement: f64,
}

/// Perturbs the state at grid time `t_star` by `noise_scale * mask * eps`
/// and re-integrates on the base grid. The prefix before `t_star` is
/// copied from `base`; `t_star = 1` perturbs the endpoint directly.
pub fn edit<F: VelocityField + ?Sized>(
    field: &F,
    base: &TrajectoryRecord,
    t_star: f64,
    noise_scale: f64,
    mask: &[f64],
    rng: &mut RngStream,
) -> Result<EditOutcome> {
    let dim = base.dim;
    if mask.len() != dim {
        return Err(Error::shape("edit mask", dim, mask.len()));
    }
    let k = base.grid_index(t_star)?;
    let n = base.len();
    let mut rec = TrajectoryRecord::new(dim, n, &base.decoder);
    rec.times.extend_from_slice(&base.times[..k]);
    rec.states.extend_from_slice(&base.states[..k * dim]);
    rec.mean.extend_from_slice(&base.mean[..k * dim]);
    rec.var.extend_from_slice(&base.var[..k * dim]);
    rec.steps.extend_from_slice(&base.steps[..k]);
    let mut x: Vec<f64> = if k == n {
        base.endpoint.clone()
    } else {
        base.state(k).to_vec()
    };
    for c in 0..dim {
        x[c] += noise_scale * mask[c] * rng.normal();
    }
    let mut state = Matrix::from_vec(1, dim, x)?;
    let mut rngs = [rng.derive("edit-field")];
    for i in k..n {
        let t = base.times[i];
        let (mu, var) = field.evaluate(&state, &[t], &mut rngs)?;
        rec.times.push(t);
        rec.states.extend_from_slice(state.row(0));
        rec.mean.extend_from_slice(mu.row(0));
        rec.var.extend_from_slice(var.row(0));
        rec.steps.push(base.steps[i]);
        let dt = base.steps[i];
        for (s, v) in state.row_mut(0).iter_mut().zip(mu.row(0)) {
            *s += dt * v;
        }
        if !state.all_finite() {
            return Err(Error::NonFinite(format!("edited state at step {i}")));
        }
    }
    rec.endpoint = state.into_vec();
    let displacement = rec
        .endpoint
        .iter()
        .zip(&base.endpoint)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(EditOutcome {
        record: rec,
        displacement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_with_var(var: &[f64]) -> TrajectoryRecord {
        let n = var.len();
        TrajectoryRecord {
            dim: 1,
            times: (0..n).map(|i| i as f64 / n as f64).collect(),
            states: vec![0.0; n],
            mean: vec![0.0; n],
            var: var.to_vec(),
            steps: vec![1.0 / n as f64; n],
            endpoint: vec![0.0],
            decoder: "test".into(),
        }
    }

    #[test]
    fn tstar_rules() {
        assert_eq!(
            select_tstar(&record_with_var(&[4.0, 3.0, 1.0, 0.0]), &[1.0]).unwrap(),
            0.0
        );
        assert_eq!(
            select_tstar(&record_with_var(&[0.0, 0.1, 5.0, 0.2]), &[1.0]).unwrap(),
            0.5
        );
        assert_eq!(
            select_tstar(&record_with_var(&[0.0, 2.0, 2.0, 1.0]), &[1.0]).unwrap(),
            0.25
        );
    }

    #[test]
    fn off_grid_edit_time_is_rejected() {
        let rec = record_with_var(&[0.0; 4]);
        assert!(rec.grid_index(0.3).is_err());
        assert_eq!(rec.grid_index(1.0).unwrap(), 4);
    }

    #[test]
    fn uniform_grid_lands_on_one() {
        let field = FnField::new(1, |_x: &[f64], _t: f64, v: &mut [f64]| v[0] = 1.0);
        for n in [1, 3, 7, 50, 333] {
            let x0 = Matrix::zeros(1, 1);
            let recs = integrate(&field, &x0, n, Controller::Uniform, &[RngStream::new(0, "s")]).unwrap();
            recs[0].validate().unwrap();
            assert_eq!(recs[0].grid().last().copied().unwrap(), 1.0);
            assert_eq!(recs[0].len(), n);
            assert!((recs[0].endpoint[0] - 1.0).abs() < 1e-12);
        }
    }
}
