//! Gauss–Hermite quadrature for Gaussian expectations.
//!
//! Nodes and weights of the physicists' Hermite rule come from the
//! Golub–Welsch construction: the nodes are the eigenvalues of the symmetric
//! tridiagonal Jacobi matrix with zero diagonal and off-diagonal entries
//! `sqrt(k / 2)`, and each weight is `sqrt(pi)` times the squared first
//! component of the matching normalized eigenvector. Rules are computed on
//! first use and cached per order.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GaussHermiteRule {
    nodes: Vec<f64>,
    /// Physicists' weights (sum to `sqrt(pi)`).
    weights: Vec<f64>,
    /// `weights / sqrt(pi)`, renormalized to sum to one.
    probability_weights: Vec<f64>,
}

impl GaussHermiteRule {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("Gauss-Hermite order must be >= 1".into()));
        }
        let mut diag = vec![0.0; order];
        let mut off: Vec<f64> = (1..order).map(|k| (k as f64 / 2.0).sqrt()).collect();
        off.push(0.0);
        let mut first_row = vec![0.0; order];
        first_row[0] = 1.0;
        tridiagonal_ql(&mut diag, &mut off, &mut first_row)?;

        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = diag
            .iter()
            .zip(&first_row)
            .map(|(&x, &v)| (x, sqrt_pi * v * v))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Enforce the exact symmetry of the rule.
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let j = n - 1 - i;
            nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
            weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        let probability_weights = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            nodes,
            weights,
            probability_weights,
        })
    }

    /// Shared rule of the given order.
    pub fn cached(order: usize) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermiteRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(rule) = guard.get(&order) {
            return Ok(Arc::clone(rule));
        }
        let rule = Arc::new(Self::new(order)?);
        guard.insert(order, Arc::clone(&rule));
        Ok(rule)
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probability_weights(&self) -> &[f64] {
        &self.probability_weights
    }
}

/// `E[f(z)]` for `z ~ N(mu, var)`.
pub fn gh_expectation(rule: &GaussHermiteRule, f: impl Fn(f64) -> f64, mu: f64, var: f64) -> Result<f64> {
    if !(var >= 0.0) || !var.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gh_expectation needs finite mu and var >= 0, got mu={mu}, var={var}"
        )));
    }
    if var == 0.0 {
        let v = f(mu);
        return if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("integrand at the mean (zero variance)".into()))
        };
    }
    let scale = (2.0 * var).sqrt();
    let mut acc = 0.0;
    for (i, (&x, &w)) in rule.nodes.iter().zip(&rule.probability_weights).enumerate() {
        let v = f(mu + scale * x);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("integrand at quadrature node {i} (x={x})")));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Implicit QL iteration for a symmetric tridiagonal matrix. On return
/// `diag` holds the eigenvalues and `first_row` the first component of each
/// eigenvector. `off[i]` couples rows `i` and `i + 1`; `off[n - 1]` is unused.
fn tridiagonal_ql(diag: &mut [f64], off: &mut [f64], first_row: &mut [f64]) -> Result<()> {
    let n = diag.len();
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if off[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 64 {
                return Err(Error::NonFinite("tridiagonal QL did not converge".into()));
            }
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = diag[m] - diag[l] + off[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    off[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
                let z = first_row[i + 1];
                first_row[i + 1] = s * first_row[i] + c * z;
                first_row[i] = c * first_row[i] - s * z;
            }
            if deflated {
                continue;
            }
            diag[l] -= p;
            off[l] = g;
            off[m] = 0.0;
        }
    }
    Ok(())
}
