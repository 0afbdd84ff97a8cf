//! Sampling-free propagation of (mean, variance) through the posterior.
//!
//! A linear layer with weights `N(theta, alpha^2 theta^2)` maps an input
//! with independent coordinates `(mu_i, var_i)` to
//!
//! ```text
//! mean'_j = sum_i mu_i theta_ij + b_j
//! var'_j  = alpha_j^2 sum_i theta_ij^2 mu_i^2 + (1 + alpha_j^2) sum_i theta_ij^2 var_i
//! ```
//!
//! Pointwise nonlinearities are closed by a Taylor expansion or by
//! Gauss-Hermite quadrature. Cross-coordinate covariance is dropped.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::backbone::Linear;
use crate::error::{Error, Result};
use crate::numerics::{flops, matmul, silu, silu_grad, silu_second, GaussHermiteRule, Matrix};
use crate::vad::{AlphaSource, VadPosterior};

/// How a pointwise nonlinearity is applied to a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Closure {
    Taylor1,
    Taylor2,
    GaussHermite(usize),
}

impl Default for Closure {
    fn default() -> Self {
        Closure::GaussHermite(10)
    }
}

impl fmt::Display for Closure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Closure::Taylor1 => write!(f, "taylor1"),
            Closure::Taylor2 => write!(f, "taylor2"),
            Closure::GaussHermite(10) => write!(f, "gausshermite"),
            Closure::GaussHermite(n) => write!(f, "gausshermite{n}"),
        }
    }
}

impl From<Closure> for String {
    fn from(c: Closure) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Closure {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Closure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taylor1" => Ok(Closure::Taylor1),
            "taylor2" => Ok(Closure::Taylor2),
            "gausshermite" | "gh" => Ok(Closure::GaussHermite(10)),
            _ => s
                .strip_prefix("gausshermite")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(Closure::GaussHermite)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown closure '{s}'"))),
        }
    }
}

/// A scalar nonlinearity with its first two derivatives and a flop cost
/// per evaluation of the function itself.
#[derive(Clone, Copy)]
pub struct Activation {
    pub f: fn(f64) -> f64,
    pub d1: fn(f64) -> f64,
    pub d2: fn(f64) -> f64,
    pub cost: u64,
}

impl Activation {
    pub const SILU: Activation = Activation {
        f: silu,
        d1: silu_grad,
        d2: silu_second,
        cost: flops::SILU,
    };

    pub const IDENTITY: Activation = Activation {
        f: |z| z,
        d1: |_| 1.0,
        d2: |_| 0.0,
        cost: 0,
    };
}

/// Diagonal Gaussian moments of a vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl MomentPair {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let p = Self { mean, var };
        p.validate()?;
        Ok(p)
    }

    pub fn deterministic(mean: Vec<f64>) -> Self {
        let var = vec![0.0; mean.len()];
        Self { mean, var }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(Error::shape("MomentPair", self.mean.len(), self.var.len()));
        }
        if self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        if !self.mean.iter().chain(&self.var).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("moment pair".into()));
        }
        Ok(())
    }
}

/// Moments for a batch, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentBatch {
    pub mean: Matrix,
    pub var: Matrix,
}

impl MomentBatch {
    pub fn row(&self, r: usize) -> MomentPair {
        MomentPair {
            mean: self.mean.row(r).to_vec(),
            var: self.var.row(r).to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }
}

/// One linear layer applied to moment inputs.
pub fn propagate_linear(input: &MomentPair, layer: &Linear, alpha: &[f64]) -> Result<MomentPair> {
    input.validate()?;
    if input.mean.len() != layer.inputs() {
        return Err(Error::shape("propagate_linear input", layer.inputs(), input.mean.len()));
    }
    if alpha.len() != layer.outputs() {
        return Err(Error::shape("propagate_linear alpha", layer.outputs(), alpha.len()));
    }
    let n = input.mean.len();
    let mean = Matrix::from_vec(1, n, input.mean.clone())?;
    let var = Matrix::from_vec(1, n, input.var.clone())?;
    let a = Matrix::from_vec(1, alpha.len(), alpha.to_vec())?;
    let w2 = layer.weight.square();
    let out = linear_moments(&mean, Some(&var), layer, &w2, &a)?;
    Ok(out.row(0))
}

/// Batched linear moments. `var_feat`, when present, holds the variances of
/// the leading `var_feat.cols()` input coordinates; the rest are
/// deterministic.
pub(crate) fn linear_moments(
    mean: &Matrix,
    var_feat: Option<&Matrix>,
    layer: &Linear,
    w2: &Matrix,
    alpha: &Matrix,
) -> Result<MomentBatch> {
    let out_mean = layer.apply(mean)?;
    let mut out_var = matmul(mean.square().view(), w2.view())?;
    flops::charge(3 * out_var.as_slice().len() as u64);
    for (v, &a) in out_var.as_mut_slice().iter_mut().zip(alpha.as_slice()) {
        *v *= a * a;
    }
    if let Some(vf) = var_feat {
        let k = vf.cols();
        let prop = matmul(vf.view(), w2.top_rows(k))?;
        flops::charge(4 * out_var.as_slice().len() as u64);
        for ((v, &p), &a) in out_var
            .as_mut_slice()
            .iter_mut()
            .zip(prop.as_slice())
            .zip(alpha.as_slice())
        {
            *v += (1.0 + a * a) * p;
        }
    }
    Ok(MomentBatch {
        mean: out_mean,
        var: out_var,
    })
}

/// Pointwise nonlinearity applied to moment inputs.
pub fn propagate_nonlinearity(input: &MomentPair, closure: Closure, act: Activation) -> Result<MomentPair> {
    input.validate()?;
    let mut mean = input.mean.clone();
    let mut var = input.var.clone();
    let rule = match closure {
        Closure::GaussHermite(n) => Some(GaussHermiteRule::cached(n)?),
        _ => None,
    };
    for (m, v) in mean.iter_mut().zip(var.iter_mut()) {
        let (a, b) = close(*m, *v, closure, act, rule.as_deref())?;
        *m = a;
        *v = b;
    }
    Ok(MomentPair { mean, var })
}

/// Elementwise closure over a batch.
pub(crate) fn nonlinearity_batch(batch: &mut MomentBatch, closure: Closure, act: Activation) -> Result<()> {
    let rule = match closure {
        Closure::GaussHermite(n) => Some(GaussHermiteRule::cached(n)?),
        _ => None,
    };
    for (m, v) in batch.mean.as_mut_slice().iter_mut().zip(batch.var.as_mut_slice()) {
        let (a, b) = close(*m, *v, closure, act, rule.as_deref())?;
        *m = a;
        *v = b;
    }
    Ok(())
}

/// Flop cost per element of [`close`] with non-zero variance.
pub fn closure_cost(closure: Closure, act: Activation) -> u64 {
    match closure {
        // f, f', square, times var
        Closure::Taylor1 => act.cost + 8 + 3,
        // plus f'' and the mean correction
        Closure::Taylor2 => act.cost + 8 + 3 + 8 + 3,
        // scale once; per node: shift (2), f, weighted mean (2),
        // weighted second moment (3); then var = s - m^2, floor (3)
        Closure::GaussHermite(n) => 2 + n as u64 * (2 + act.cost + 5) + 3,
    }
}

#[inline]
fn close(mu: f64, var: f64, closure: Closure, act: Activation, rule: Option<&GaussHermiteRule>) -> Result<(f64, f64)> {
    if !(var >= 0.0) || !mu.is_finite() || !var.is_finite() {
        return Err(Error::NonFinite(format!("closure input ({mu}, {var})")));
    }
    if var == 0.0 {
        flops::charge(act.cost);
        return Ok(((act.f)(mu), 0.0));
    }
    flops::charge(closure_cost(closure, act));
    let (m, v) = match closure {
        Closure::Taylor1 => {
            let d = (act.d1)(mu);
            ((act.f)(mu), d * d * var)
        }
        Closure::Taylor2 => {
            let d = (act.d1)(mu);
            ((act.f)(mu) + 0.5 * (act.d2)(mu) * var, d * d * var)
        }
        Closure::GaussHermite(_) => {
            let rule = rule.expect("rule prepared for quadrature closure");
            let scale = (2.0 * var).sqrt();
            let mut m = 0.0;
            let mut s = 0.0;
            for (&x, &w) in rule.nodes().iter().zip(rule.probability_weights()) {
                let f = (act.f)(mu + scale * x);
                m += w * f;
                s += w * f * f;
            }
            (m, (s - m * m).max(0.0))
        }
    };
    if !m.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite(format!("closure output at mean {mu}")));
    }
    Ok((m, v.max(0.0)))
}

/// Output moments of the velocity for a batch of states: the posterior-mean
/// velocity and its per-coordinate variance, in one deterministic pass.
/// The scales of every layer are inferred from the running mean input.
pub fn forward_with_moments(
    posterior: &VadPosterior,
    x: &Matrix,
    times: &[f64],
    closure: Closure,
) -> Result<MomentBatch> {
    let cfg = posterior.config();
    if x.cols() != cfg.data_dim || x.rows() != times.len() {
        return Err(Error::shape(
            "forward_with_moments input",
            format!("{} rows x {}", times.len(), cfg.data_dim),
            format!("{:?}", x.shape()),
        ));
    }
    if let AlphaSource::Fixed(a) = posterior.alpha_source() {
        if *a == 0.0 {
            // Zero spread: the plain backbone forward, variance exactly 0.
            let mean = posterior.backbone().forward(x, times)?;
            let var = Matrix::zeros(mean.rows(), mean.cols());
            return Ok(MomentBatch { mean, var });
        }
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("moment forward input state".into()));
    }
    let emb = posterior.backbone().embedding().embed_batch(times)?;
    let mut h_mean = x.clone();
    let mut h_var: Option<Matrix> = None;
    let depth = cfg.depth;
    for (l, layer) in posterior.backbone().layers().iter().enumerate() {
        let input = h_mean.hcat(&emb)?;
        let alpha = posterior.layer_alpha(l, &input)?;
        let w2 = layer.weight.square();
        let mut out = linear_moments(&input, h_var.as_ref(), layer, &w2, &alpha)?;
        if !out.mean.all_finite() || !out.var.all_finite() {
            return Err(Error::NonFinite(format!("moment layer {l} pre-activation")));
        }
        if l + 1 < depth {
            nonlinearity_batch(&mut out, closure, Activation::SILU)?;
        }
        h_mean = out.mean;
        h_var = Some(out.var);
    }
    Ok(MomentBatch {
        mean: h_mean,
        var: h_var.expect("depth >= 1"),
    })
}

/// Single-state convenience wrapper.
pub fn forward_with_moments_one(posterior: &VadPosterior, x: &[f64], t: f64, closure: Closure) -> Result<MomentPair> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(forward_with_moments(posterior, &m, &[t], closure)?.row(0))
}
