//! Experiment harness: sample quality, confidence-guided filtering,
//! dispersion baselines, decoders, controllers and editing.

use serde::{Deserialize, Serialize};

use super::{auprc, kde_symmetric_kl, misplacement, misplacement_labels, positive_rate};
use crate::confidence::{
    c_dispersion, fit_head, head_features, score_record, HeadConfig, LogisticHead, Readout, Windows, HEAD_FEATURES,
};
use crate::error::{Error, Result};
use crate::moments::Closure;
use crate::numerics::{Matrix, RngStream};
use crate::par::map_items;
use crate::sampler::{
    edit, endpoints, integrate, sample_streams, select_tstar, Controller, DropoutField, MapField, StochasticField,
    TrajectoryRecord, VelocityField,
};
use crate::vad::VadPosterior;

/// One metric in a report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub table: String,
    pub method: String,
    pub scoring: String,
    pub metric: String,
    pub value: f64,
    /// Trajectories integrated per delivered sample.
    pub trajectories: usize,
    pub flops_ratio: Option<f64>,
}

impl ReportRow {
    pub fn new(table: &str, method: &str, scoring: &str, metric: &str, value: f64, trajectories: usize) -> Self {
        Self {
            table: table.into(),
            method: method.into(),
            scoring: scoring.into(),
            metric: metric.into(),
            value,
            trajectories,
            flops_ratio: None,
        }
    }

    pub fn with_flops_ratio(mut self, r: f64) -> Self {
        self.flops_ratio = Some(r);
        self
    }
}

/// Base noise for `n` samples: row `i` is the same for every experiment
/// run from the same stream.
pub fn base_noise(n: usize, dim: usize, rng: &RngStream) -> Matrix {
    let mut x0 = Matrix::zeros(n, dim);
    let mut r = rng.derive("x0");
    r.fill_normal(x0.as_mut_slice());
    x0
}

/// MAP trajectories from the shared base noise.
pub fn map_trajectories(
    posterior: &VadPosterior,
    n: usize,
    n_steps: usize,
    closure: Closure,
    controller: Controller,
    rng: &RngStream,
) -> Result<Vec<TrajectoryRecord>> {
    let x0 = base_noise(n, posterior.config().data_dim, rng);
    let field = MapField::new(posterior, closure);
    integrate(&field, &x0, n_steps, controller, &sample_streams(rng, 0, n))
}

/// Misplacement and KDE distance of a set of endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub misplacement: f64,
    pub kde_kl: f64,
}

pub fn quality(points: &Matrix) -> Result<Quality> {
    Ok(Quality {
        misplacement: misplacement(points),
        kde_kl: kde_symmetric_kl(points)?,
    })
}

/// Fit/eval split: a seeded permutation, first half fits.
pub fn split_indices(n: usize, rng: &RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng.derive("split");
    for i in (1..n).rev() {
        let j = r.below(i + 1);
        idx.swap(i, j);
    }
    let eval = idx.split_off(n / 2);
    (idx, eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilteringResult {
    pub n_fit: usize,
    pub n_eval: usize,
    /// Positive rate on the evaluation half (the random-score floor).
    pub positive_rate: f64,
    pub misplacement: f64,
    pub auprc: Vec<(Readout, f64)>,
    pub head: LogisticHead,
}

impl FilteringResult {
    pub fn get(&self, r: Readout) -> Option<f64> {
        self.auprc.iter().find(|(k, _)| *k == r).map(|(_, v)| *v)
    }

    pub fn rows(&self, method: &str) -> Vec<ReportRow> {
        let mut rows = vec![ReportRow::new(
            "filtering",
            method,
            "positive_rate",
            "rate",
            self.positive_rate,
            1,
        )];
        for (r, v) in &self.auprc {
            rows.push(ReportRow::new("filtering", method, r.name(), "auprc", *v, 1));
        }
        rows
    }
}

/// Labels MAP samples by misplacement, scores them with every label-free
/// readout plus the learned head, and reports AUPRC on the held-out half.
pub fn filtering_from_records(
    records: &[TrajectoryRecord],
    windows: Windows,
    head_cfg: &HeadConfig,
    rng: &RngStream,
) -> Result<FilteringResult> {
    let n = records.len();
    let labels = misplacement_labels(&endpoints(records));
    let (fit, eval) = split_indices(n, rng);
    let feats = |ids: &[usize]| {
        let mut m = Matrix::zeros(ids.len(), HEAD_FEATURES);
        for (r, &i) in ids.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&head_features(&records[i], HEAD_FEATURES));
        }
        m
    };
    let fit_labels: Vec<bool> = fit.iter().map(|&i| labels[i]).collect();
    let eval_labels: Vec<bool> = eval.iter().map(|&i| labels[i]).collect();
    let head = fit_head(&feats(&fit), &fit_labels, head_cfg)?;
    let eval_feats = feats(&eval);
    let mut rand = rng.derive("random-scores");
    let mut auprcs = Vec::new();
    for readout in [
        Readout::Endpoint,
        Readout::Integrated,
        Readout::TemporalRatio,
        Readout::Learned,
        Readout::Random,
    ] {
        let scores: Vec<f64> = match readout {
            Readout::Learned => (0..eval.len())
                .map(|r| head.score(eval_feats.row(r)))
                .collect::<Result<_>>()?,
            Readout::Random => (0..eval.len()).map(|_| rand.uniform()).collect(),
            _ => eval
                .iter()
                .map(|&i| score_record(&records[i], readout, windows))
                .collect::<Result<_>>()?,
        };
        auprcs.push((readout, auprc(&scores, &eval_labels)?));
    }
    Ok(FilteringResult {
        n_fit: fit.len(),
        n_eval: eval.len(),
        positive_rate: positive_rate(&eval_labels),
        misplacement: positive_rate(&labels),
        auprc: auprcs,
        head,
    })
}

/// End-to-end filtering run on `n` fresh MAP samples.
pub fn filtering_experiment(
    posterior: &VadPosterior,
    n: usize,
    n_steps: usize,
    closure: Closure,
    windows: Windows,
    head_cfg: &HeadConfig,
    rng: &RngStream,
) -> Result<FilteringResult> {
    let records = map_trajectories(posterior, n, n_steps, closure, Controller::Uniform, rng)?;
    filtering_from_records(&records, windows, head_cfg, rng)
}

/// Dispersion baseline family.
#[derive(Clone, Debug)]
pub enum Baseline<'a> {
    McDropout {
        posterior: &'a VadPosterior,
        p: f64,
        k: usize,
    },
    Ensemble {
        members: Vec<&'a VadPosterior>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    pub k: usize,
    pub misplacement: f64,
    pub positive_rate: f64,
    pub auprc: f64,
    /// Delivered samples (replica or member 0), one row each.
    #[serde(skip)]
    pub delivered: Option<Matrix>,
    pub dispersion: Vec<f64>,
}

impl BaselineResult {
    pub fn rows(&self) -> Vec<ReportRow> {
        vec![
            ReportRow::new("quality", &self.method, "-", "misplacement", self.misplacement, self.k),
            ReportRow::new("filtering", &self.method, "dispersion", "auprc", self.auprc, self.k),
            ReportRow::new(
                "filtering",
                &self.method,
                "positive_rate",
                "rate",
                self.positive_rate,
                self.k,
            ),
        ]
    }
}

/// Integrates `k` replicas (or members) from the same base noise, delivers
/// replica 0 and scores each sample by endpoint dispersion.
pub fn baseline_run(baseline: &Baseline<'_>, n: usize, n_steps: usize, rng: &RngStream) -> Result<BaselineResult> {
    let (method, runs): (String, Vec<Vec<TrajectoryRecord>>) = match baseline {
        Baseline::McDropout { posterior, p, k } => {
            if *k < 2 {
                return Err(Error::InvalidArgument("dispersion needs k >= 2".into()));
            }
            let x0 = base_noise(n, posterior.config().data_dim, rng);
            let field = DropoutField { posterior, p: *p };
            let runs = (0..*k)
                .map(|j| {
                    let streams = sample_streams(&rng.derive(&format!("replica-{j}")), 0, n);
                    integrate(&field, &x0, n_steps, Controller::Uniform, &streams)
                })
                .collect::<Result<_>>()?;
            ("mc_dropout".into(), runs)
        }
        Baseline::Ensemble { members } => {
            if members.len() < 2 {
                return Err(Error::InvalidArgument("ensemble needs at least two members".into()));
            }
            let x0 = base_noise(n, members[0].config().data_dim, rng);
            let runs = members
                .iter()
                .map(|m| {
                    let field = MapField::new(m, Closure::default());
                    integrate(&field, &x0, n_steps, Controller::Uniform, &sample_streams(rng, 0, n))
                })
                .collect::<Result<_>>()?;
            ("ensemble".into(), runs)
        }
    };
    let k = runs.len();
    let delivered = endpoints(&runs[0]);
    let labels = misplacement_labels(&delivered);
    let dispersion: Vec<f64> = (0..n)
        .map(|i| {
            let ends: Vec<&[f64]> = runs.iter().map(|r| r[i].endpoint.as_slice()).collect();
            c_dispersion(&ends)
        })
        .collect::<Result<_>>()?;
    let ap = auprc(&dispersion, &labels)?;
    Ok(BaselineResult {
        method,
        k,
        misplacement: positive_rate(&labels),
        positive_rate: positive_rate(&labels),
        auprc: ap,
        delivered: Some(delivered),
        dispersion,
    })
}

/// Misplacement of the MAP, single-sample and mean-of-k decoders from the
/// same base noise.
pub fn decoder_comparison(
    posterior: &VadPosterior,
    n: usize,
    n_steps: usize,
    k: usize,
    closure: Closure,
    rng: &RngStream,
) -> Result<Vec<(String, f64)>> {
    let x0 = base_noise(n, posterior.config().data_dim, rng);
    let streams = sample_streams(&rng.derive("decoder"), 0, n);
    let map = MapField::new(posterior, closure);
    let single = StochasticField::new(posterior, 1)?;
    let mean_k = StochasticField::new(posterior, k)?;
    let fields: [&dyn VelocityField; 3] = [&map, &single, &mean_k];
    fields
        .iter()
        .map(|f| {
            let recs = integrate(*f, &x0, n_steps, Controller::Uniform, &streams)?;
            Ok((f.tag().to_string(), misplacement(&endpoints(&recs))))
        })
        .collect()
}

/// Misplacement per controller and step budget from the same base noise.
pub fn controller_comparison(
    posterior: &VadPosterior,
    n: usize,
    budgets: &[usize],
    controllers: &[Controller],
    closure: Closure,
    rng: &RngStream,
) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for &nb in budgets {
        for c in controllers {
            let recs = map_trajectories(posterior, n, nb, closure, *c, rng)?;
            out.push((c.name().to_string(), nb, misplacement(&endpoints(&recs))));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditingResult {
    pub edits: usize,
    pub noise_scale: f64,
    pub success_argmax: f64,
    pub success_random: f64,
    pub mean_displacement_argmax: f64,
    pub mean_displacement_random: f64,
}

/// Edits `n_edits` MAP trajectories at the variance peak and at a uniformly
/// random grid time, with the same noise draw for both. Success means the
/// edited endpoint is in the support and moved by more than half a cell.
pub fn editing_experiment(
    posterior: &VadPosterior,
    n_edits: usize,
    n_steps: usize,
    noise_scale: f64,
    mask: &[f64],
    closure: Closure,
    rng: &RngStream,
) -> Result<EditingResult> {
    let records = map_trajectories(posterior, n_edits, n_steps, closure, Controller::Uniform, rng)?;
    let field = MapField::new(posterior, closure);
    let edit_base = rng.derive("edits");
    let outcomes = map_items(&records, |i, rec| -> Result<[(bool, f64); 2]> {
        let mut pick = edit_base.fork(2 * i as u64);
        let noise = edit_base.fork(2 * i as u64 + 1);
        let t_arg = select_tstar(rec, mask)?;
        let t_rand = rec.times[pick.below(rec.len())];
        let mut out = [(false, 0.0); 2];
        for (slot, t) in [t_arg, t_rand].into_iter().enumerate() {
            let mut eps = noise.clone();
            let e = edit(&field, rec, t, noise_scale, mask, &mut eps)?;
            let ok = super::in_support(&e.record.endpoint) && e.displacement > 0.5;
            out[slot] = (ok, e.displacement);
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = outcomes.len().max(1) as f64;
    let rate = |s: usize| outcomes.iter().filter(|o| o[s].0).count() as f64 / n;
    let disp = |s: usize| outcomes.iter().map(|o| o[s].1).sum::<f64>() / n;
    Ok(EditingResult {
        edits: outcomes.len(),
        noise_scale,
        success_argmax: rate(0),
        success_random: rate(1),
        mean_displacement_argmax: disp(0),
        mean_displacement_random: disp(1),
    })
}
