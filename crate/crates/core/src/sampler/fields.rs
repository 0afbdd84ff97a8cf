//! Velocity fields the integrators can step through.

use crate::backbone::DropoutMasks;
use crate::error::{Error, Result};
use crate::moments::{forward_with_moments, Closure};
use crate::numerics::{flops, Matrix, RngStream};
use crate::vad::VadPosterior;

/// A batch velocity oracle returning `(mean, variance)` per row.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Decoder tag stored in trajectory records.
    fn tag(&self) -> &str;

    /// Row `r` may draw from `rngs[r]`.
    fn evaluate(&self, x: &Matrix, times: &[f64], rngs: &mut [RngStream]) -> Result<(Matrix, Matrix)>;
}

/// Posterior-mean velocity with its analytic variance.
pub struct MapField<'a> {
    pub posterior: &'a VadPosterior,
    pub closure: Closure,
}

impl<'a> MapField<'a> {
    pub fn new(posterior: &'a VadPosterior, closure: Closure) -> Self {
        Self { posterior, closure }
    }
}

impl VelocityField for MapField<'_> {
    fn dim(&self) -> usize {
        self.posterior.config().data_dim
    }

    fn tag(&self) -> &str {
        "map"
    }

    fn evaluate(&self, x: &Matrix, times: &[f64], _rngs: &mut [RngStream]) -> Result<(Matrix, Matrix)> {
        let m = forward_with_moments(self.posterior, x, times, self.closure)?;
        Ok((m.mean, m.var))
    }
}

/// Average of `k` sampled forward passes per step. The reported variance
/// is the sample variance of the `k` velocities (zero for `k = 1`).
pub struct StochasticField<'a> {
    pub posterior: &'a VadPosterior,
    pub k: usize,
    tag: String,
}

impl<'a> StochasticField<'a> {
    pub fn new(posterior: &'a VadPosterior, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("stochastic decoder needs k >= 1".into()));
        }
        let tag = if k == 1 {
            "stochastic".to_string()
        } else {
            format!("mean_k{k}")
        };
        Ok(Self { posterior, k, tag })
    }
}

impl VelocityField for StochasticField<'_> {
    fn dim(&self) -> usize {
        self.posterior.config().data_dim
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn evaluate(&self, x: &Matrix, times: &[f64], rngs: &mut [RngStream]) -> Result<(Matrix, Matrix)> {
        let (rows, dim) = x.shape();
        let mut sum = Matrix::zeros(rows, dim);
        let mut sq = Matrix::zeros(rows, dim);
        for _ in 0..self.k {
            let noise = self.posterior.draw_noise(rngs);
            let (v, _) = self.posterior.forward_sampled(x, times, &noise)?;
            flops::charge(3 * v.as_slice().len() as u64);
            for ((s, q), &vi) in sum.as_mut_slice().iter_mut().zip(sq.as_mut_slice()).zip(v.as_slice()) {
                *s += vi;
                *q += vi * vi;
            }
        }
        let k = self.k as f64;
        let mean = sum.map(1, |s| s / k);
        let mut var = Matrix::zeros(rows, dim);
        if self.k > 1 {
            flops::charge(4 * var.as_slice().len() as u64);
            for ((v, &q), &m) in var.as_mut_slice().iter_mut().zip(sq.as_slice()).zip(mean.as_slice()) {
                *v = ((q - k * m * m) / (k - 1.0)).max(0.0);
            }
        }
        Ok((mean, var))
    }
}

/// Deterministic backbone with fresh Bernoulli dropout masks on every
/// evaluation. Variance is reported as zero; the spread shows up across
/// independent trajectories instead.
pub struct DropoutField<'a> {
    pub posterior: &'a VadPosterior,
    pub p: f64,
}

impl VelocityField for DropoutField<'_> {
    fn dim(&self) -> usize {
        self.posterior.config().data_dim
    }

    fn tag(&self) -> &str {
        "mc_dropout"
    }

    fn evaluate(&self, x: &Matrix, times: &[f64], rngs: &mut [RngStream]) -> Result<(Matrix, Matrix)> {
        let masks = DropoutMasks::draw(self.posterior.config(), self.p, rngs);
        let v = self.posterior.forward_dropout(x, times, masks)?;
        let var = Matrix::zeros(v.rows(), v.cols());
        Ok((v, var))
    }
}

/// A closed-form field `f(x, t, out)` evaluated row by row; variance zero.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> &str {
        "analytic"
    }

    fn evaluate(&self, x: &Matrix, times: &[f64], _rngs: &mut [RngStream]) -> Result<(Matrix, Matrix)> {
        let mut v = Matrix::zeros(x.rows(), self.dim);
        for r in 0..x.rows() {
            (self.f)(x.row(r), times[r], v.row_mut(r));
        }
        Ok((v, Matrix::zeros(x.rows(), self.dim)))
    }
}
