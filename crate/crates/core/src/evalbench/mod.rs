//! Checkerboard target and sample-quality metrics.

pub mod experiments;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{flops, matmul, Matrix, RngStream};

/// A `cells x cells` board on `[lo, lo + cells]^2` with unit cells; the
/// support is the cells whose index sum is even.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardSpec {
    pub lo: f64,
    pub cells: usize,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        Self { lo: -2.0, cells: 4 }
    }
}

impl CheckerboardSpec {
    pub fn hi(&self) -> f64 {
        self.lo + self.cells as f64
    }

    /// Lower-left corners of the support cells, row-major in `(i, j)`.
    pub fn support_cells(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for i in 0..self.cells {
            for j in 0..self.cells {
                if (i + j) % 2 == 0 {
                    out.push((self.lo + i as f64, self.lo + j as f64));
                }
            }
        }
        out
    }

    pub fn support_area(&self) -> f64 {
        self.support_cells().len() as f64
    }

    /// Containment with inclusive cell boundaries: a point on an edge or
    /// corner of a support cell is in the support.
    pub fn in_support(&self, x: f64, y: f64) -> bool {
        let hi = self.hi();
        if !(x >= self.lo && x <= hi && y >= self.lo && y <= hi) {
            return false;
        }
        let candidates = |v: f64| {
            let s = v - self.lo;
            let f = s.floor();
            let i = f as i64;
            let inside = |k: i64| (k >= 0 && k < self.cells as i64).then_some(k);
            if s == f {
                // On a grid line: touches the cell on either side.
                [inside(i), inside(i - 1)]
            } else {
                [inside(i), None]
            }
        };
        for i in candidates(x).into_iter().flatten() {
            for j in candidates(y).into_iter().flatten() {
                if (i + j) % 2 == 0 {
                    return true;
                }
            }
        }
        false
    }

    /// `n` points uniform on the support, one row each.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Matrix {
        let cells = self.support_cells();
        let mut out = Matrix::zeros(n, 2);
        for r in 0..n {
            let (cx, cy) = cells[rng.below(cells.len())];
            let row = out.row_mut(r);
            row[0] = cx + rng.uniform();
            row[1] = cy + rng.uniform();
        }
        out
    }
}

pub fn sample_checkerboard(n: usize, rng: &mut RngStream) -> Matrix {
    CheckerboardSpec::default().sample(n, rng)
}

pub fn in_support(x: &[f64]) -> bool {
    CheckerboardSpec::default().in_support(x[0], x[1])
}

/// Fraction of rows outside the support; `0` for an empty set.
pub fn misplacement(points: &Matrix) -> f64 {
    if points.rows() == 0 {
        return 0.0;
    }
    let bad = (0..points.rows()).filter(|&r| !in_support(points.row(r))).count();
    bad as f64 / points.rows() as f64
}

/// Per-sample misplacement labels (1 = outside the support).
pub fn misplacement_labels(points: &Matrix) -> Vec<bool> {
    (0..points.rows()).map(|r| !in_support(points.row(r))).collect()
}

pub const KDE_GRID: usize = 200;
pub const PROB_FLOOR: f64 = 1e-12;

/// Symmetric KL between a Gaussian KDE of `points` and the target, both
/// evaluated on a `200 x 200` cell-centre grid over the board.
///
/// The KDE uses a per-axis bandwidth `h_d = n^(-1/6) sigma_d`. The target
/// is smoothed with the same product kernel (uniform cell mass convolved
/// with the Gaussian, in closed form), so an exact sampler scores near
/// zero instead of paying for the kernel's own blur.
pub fn kde_symmetric_kl(points: &Matrix) -> Result<f64> {
    let spec = CheckerboardSpec::default();
    let n = points.rows();
    if points.cols() != 2 {
        return Err(Error::shape("kde points", 2, points.cols()));
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("KDE needs at least 2 points, got {n}")));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("KDE points".into()));
    }
    let mut h = [0.0; 2];
    for (d, hd) in h.iter_mut().enumerate() {
        let mean = (0..n).map(|r| points.get(r, d)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (points.get(r, d) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("zero spread along axis {d}")));
        }
        *hd = (n as f64).powf(-1.0 / 6.0) * var.sqrt();
    }
    let g = KDE_GRID;
    let step = (spec.hi() - spec.lo) / g as f64;
    let centres: Vec<f64> = (0..g).map(|i| spec.lo + (i as f64 + 0.5) * step).collect();

    // p[a][b] = sum_s Kx[s][a] Ky[s][b]
    let kernel = |d: usize| {
        let inv = 1.0 / h[d];
        Matrix::from_fn(n, g, |s, a| {
            let z = (centres[a] - points.get(s, d)) * inv;
            (-0.5 * z * z).exp()
        })
    };
    let kx = kernel(0);
    let ky = kernel(1);
    flops::charge(2 * 5 * (n * g) as u64);
    let p = matmul(kx.t(), ky.view())?;

    let mass = |d: usize, lo: f64| -> Vec<f64> {
        centres
            .iter()
            .map(|&c| normal_cdf((c - lo) / h[d]) - normal_cdf((c - lo - 1.0) / h[d]))
            .collect()
    };
    let mut q = Matrix::zeros(g, g);
    for (cx, cy) in spec.support_cells() {
        let mx = mass(0, cx);
        let my = mass(1, cy);
        for a in 0..g {
            let row = q.row_mut(a);
            for b in 0..g {
                row[b] += mx[a] * my[b];
            }
        }
    }
    let p = normalize_with_floor(p.into_vec());
    let q = normalize_with_floor(q.into_vec());
    Ok(symmetric_kl(&p, &q))
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Normalizes to sum 1, floors at [`PROB_FLOOR`], renormalizes.
pub fn normalize_with_floor(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x = (*x / s).max(PROB_FLOOR);
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// `KL(p || q) + KL(q || p)` for strictly positive distributions.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Average precision of `scores` (higher = more likely positive).
///
/// Tied scores form one threshold: the whole tie group enters the
/// retained set together.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auprc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auprc scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Degenerate(
            "auprc needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of positive labels.
pub fn positive_rate(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_and_boundaries() {
        let s = CheckerboardSpec::default();
        assert_eq!(s.support_cells().len(), 8);
        assert!(!s.in_support(-1.5, 1.5));
        assert!(s.in_support(-1.5, -1.5));
        // Corner shared by four cells, two of them in the support.
        assert!(s.in_support(0.0, 0.0));
        // Edge between an odd and an even cell.
        assert!(s.in_support(-1.0, -1.5));
        assert!(s.in_support(2.0, 2.0));
        assert!(!s.in_support(2.0001, 0.5));
        assert!(!s.in_support(f64::NAN, 0.0));
    }

    #[test]
    fn sampler_stays_in_support() {
        let mut rng = RngStream::new(3, "board");
        let pts = sample_checkerboard(5000, &mut rng);
        assert_eq!(misplacement(&pts), 0.0);
    }

    #[test]
    fn auprc_hand_example() {
        let ap = auprc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert!(auprc(&[0.1, 0.9], &[true, true]).is_err());
    }

    #[test]
    fn all_tied_scores_give_prevalence() {
        let labels = [true, false, false, true, false];
        assert!((auprc(&[1.0; 5], &labels).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn kde_of_one_cell_is_far() {
        let mut rng = RngStream::new(5, "one-cell");
        let pts = Matrix::from_fn(2000, 2, |_, _| -2.0 + rng.uniform());
        assert!(kde_symmetric_kl(&pts).unwrap() > 2.0);
    }
}
