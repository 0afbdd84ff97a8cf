//! Variational flow-matching training on the checkerboard.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, DropoutMasks, ParamSet};
use crate::error::{Error, Result};
use crate::evalbench::{misplacement, CheckerboardSpec};
use crate::moments::Closure;
use crate::numerics::{adam_step, AdamConfig, AdamState, Matrix, RngStream};
use crate::par::{try_map_chunks, CHUNK_ROWS};
use crate::sampler::{endpoints, integrate, sample_streams, Controller, MapField};
use crate::vad::{kl_regularizer, AlphaSource, PosteriorGradient, VadPosterior};

/// Which objective is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain conditional flow matching on the deterministic backbone.
    Fm,
    /// Regression through sampled weights plus the scale regularizer.
    Fmwc,
    /// Flow matching with Bernoulli dropout on hidden activations.
    McDropout { p: f64 },
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Fm => "fm",
            TrainMode::Fmwc => "fmwc",
            TrainMode::McDropout { .. } => "mc_dropout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub architecture: BackboneConfig,
    pub inference_width: usize,
    /// Initial raw log-scale of every inference-net output.
    pub init_log_alpha: f64,
    pub lr: f64,
    /// Cosine-decay target for the learning rate; `None` keeps it constant.
    pub lr_final: Option<f64>,
    pub batch: usize,
    pub iterations: usize,
    /// Regularizer weight `beta`.
    pub kl_weight: f64,
    pub prior_rate: f64,
    pub kl_cycles: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Closure used by the misplacement probe.
    pub closure: Closure,
    /// Iterations between loss records.
    pub log_every: usize,
    /// Iterations between misplacement probes; `0` disables probing.
    pub probe_every: usize,
    pub probe_samples: usize,
    pub probe_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Fmwc,
            architecture: BackboneConfig::default(),
            inference_width: 64,
            init_log_alpha: (0.3f64 / 0.7).ln(),
            lr: 1e-3,
            lr_final: None,
            batch: 4096,
            iterations: 20_000,
            kl_weight: 1e-3,
            prior_rate: 0.3,
            kl_cycles: 4,
            warmup_fraction: 0.1,
            seed: 0,
            closure: Closure::default(),
            log_every: 100,
            probe_every: 1000,
            probe_samples: 2000,
            probe_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0) || self.batch == 0 || self.iterations == 0 {
            return bad("lr, batch and iterations must be positive");
        }
        if self.lr_final.is_some_and(|f| !(f > 0.0 && f <= self.lr)) {
            return bad("final lr must be in (0, lr]");
        }
        if !(self.kl_weight >= 0.0) || self.kl_cycles == 0 {
            return bad("kl weight must be >= 0 and cycles positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup fraction must be in (0, 1)");
        }
        if !(self.prior_rate > 0.0 && self.prior_rate < 1.0) {
            return bad("prior rate must be in (0, 1)");
        }
        if let TrainMode::McDropout { p } = self.mode {
            if !(p > 0.0 && p < 1.0) {
                return bad("dropout rate must be in (0, 1)");
            }
        }
        if self.inference_width == 0 || self.log_every == 0 {
            return bad("inference width and log interval must be positive");
        }
        if self.probe_every > 0 && (self.probe_samples == 0 || self.probe_steps == 0) {
            return bad("probe needs samples and steps");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Short SHA-256 digest of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One conditional-path training example.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmPair {
    pub x_t: Vec<f64>,
    pub u_t: Vec<f64>,
    pub t: f64,
}

/// Linear interpolant `x_t = (1 - t) x0 + t x1` with velocity `x1 - x0`.
pub fn cfm_pair(x0: &[f64], x1: &[f64], t: f64) -> Result<CfmPair> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::shape("cfm_pair", x0.len(), x1.len()));
    }
    Ok(CfmPair {
        x_t: x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
        u_t: x0.iter().zip(x1).map(|(a, b)| b - a).collect(),
        t,
    })
}

/// Cyclical linear warm-up of the regularizer weight.
pub fn kl_schedule(iter: usize, total: usize, cycles: usize, warmup: f64, beta: f64) -> f64 {
    let seg = total as f64 / cycles.max(1) as f64;
    let pos = (iter as f64 % seg) / seg;
    if pos < warmup {
        beta * pos / warmup
    } else {
        beta
    }
}

/// Value of the training objective on one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    /// Total objective `regression + beta_t * kl / B`.
    pub loss: f64,
    /// Mean squared velocity error.
    pub regression: f64,
    /// Regularizer summed over every scale in the batch, divided by `B`.
    pub kl: f64,
}

/// A training batch: interpolant states, per-row times and target
/// velocities, plus whatever noise the objective consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_t: Matrix,
    pub times: Vec<f64>,
    pub target: Matrix,
}

impl Batch {
    pub fn from_endpoints(x0: &Matrix, x1: &Matrix, times: &[f64]) -> Result<Self> {
        if x0.shape() != x1.shape() || x0.rows() != times.len() {
            return Err(Error::shape(
                "batch",
                format!("{:?}", x0.shape()),
                format!("{:?}", x1.shape()),
            ));
        }
        let mut x_t = Matrix::zeros(x0.rows(), x0.cols());
        let mut target = Matrix::zeros(x0.rows(), x0.cols());
        for r in 0..x0.rows() {
            let p = cfm_pair(x0.row(r), x1.row(r), times[r])?;
            x_t.row_mut(r).copy_from_slice(&p.x_t);
            target.row_mut(r).copy_from_slice(&p.u_t);
        }
        Ok(Self {
            x_t,
            times: times.to_vec(),
            target,
        })
    }

    /// Fresh `(x0 ~ N(0, I), x1 ~ target, t ~ U[0, 1])` rows.
    pub fn draw(rows: usize, board: &CheckerboardSpec, rng: &mut RngStream) -> Result<Self> {
        let mut x0 = Matrix::zeros(rows, 2);
        rng.fill_normal(x0.as_mut_slice());
        let x1 = board.sample(rows, rng);
        let mut times = vec![0.0; rows];
        rng.fill_uniform(&mut times);
        Self::from_endpoints(&x0, &x1, &times)
    }

    pub fn rows(&self) -> usize {
        self.times.len()
    }
}

/// Noise consumed by one objective evaluation.
#[derive(Clone, Debug)]
pub enum BatchNoise {
    None,
    /// Per-layer standard-normal pre-activation noise.
    Weights(Vec<Matrix>),
    Dropout(DropoutMasks),
}

/// The objective on `batch` with `norm` as the batch-size normalization
/// (the full batch size when `batch` is one chunk of it). Gradients are of
/// `regression_sum / norm + beta_t * kl_sum / norm`.
pub fn elbo_loss(
    posterior: &VadPosterior,
    batch: &Batch,
    beta_t: f64,
    noise: BatchNoise,
    norm: f64,
) -> Result<(ElboValue, PosteriorGradient)> {
    if batch.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (v, grad_of, kl_sum) = match noise {
        BatchNoise::Weights(eps) => {
            let (v, cache) = posterior.forward_sampled(&batch.x_t, &batch.times, &eps)?;
            let kl = match posterior.alpha_source() {
                AlphaSource::Learned(_) => kl_regularizer(cache.alphas(), posterior.prior_rate())?,
                AlphaSource::Fixed(_) => 0.0,
            };
            (v, Grad::Sampled(cache), kl)
        }
        BatchNoise::None => {
            let (v, cache) = posterior.backbone().forward_cached(&batch.x_t, &batch.times, None)?;
            (v, Grad::Plain(cache), 0.0)
        }
        BatchNoise::Dropout(masks) => {
            let (v, cache) = posterior
                .backbone()
                .forward_cached(&batch.x_t, &batch.times, Some(masks))?;
            (v, Grad::Plain(cache), 0.0)
        }
    };
    let mut dv = v.clone();
    let mut sq = 0.0;
    for (d, &u) in dv.as_mut_slice().iter_mut().zip(batch.target.as_slice()) {
        let e = *d - u;
        sq += e * e;
        *d = 2.0 * e / norm;
    }
    let regression = sq / norm;
    let kl = kl_sum / norm;
    let loss = regression + beta_t * kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grad = match grad_of {
        Grad::Sampled(cache) => posterior.backward_sampled(&cache, &dv, beta_t / norm)?,
        Grad::Plain(cache) => {
            let mut g = posterior.zero_gradient();
            g.backbone = posterior.backbone().backward(&cache, &dv)?;
            g
        }
    };
    Ok((ElboValue { loss, regression, kl }, grad))
}

enum Grad {
    Sampled(crate::vad::SampledCache),
    Plain(crate::backbone::ForwardCache),
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub regression_loss: f64,
    pub kl: f64,
    pub beta_t: f64,
    pub misplacement_probe: Option<f64>,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: VadPosterior,
    /// Lowest probe misplacement seen (the last state when probing is off).
    pub best: VadPosterior,
    pub best_iter: usize,
    pub best_probe: Option<f64>,
    pub log: Vec<TrainRecord>,
}

/// Step size at iteration `iter`.
pub fn learning_rate(cfg: &TrainConfig, iter: usize) -> f64 {
    match cfg.lr_final {
        None => cfg.lr,
        Some(end) => {
            let frac = iter as f64 / cfg.iterations.max(1) as f64;
            end + 0.5 * (cfg.lr - end) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Initial posterior for a training mode.
pub fn init_posterior(cfg: &TrainConfig) -> Result<VadPosterior> {
    let mut rng = RngStream::new(cfg.seed, "init");
    match cfg.mode {
        TrainMode::Fmwc => VadPosterior::init(
            cfg.architecture.clone(),
            cfg.inference_width,
            cfg.init_log_alpha,
            cfg.prior_rate,
            &mut rng,
        ),
        TrainMode::Fm | TrainMode::McDropout { .. } => VadPosterior::deterministic(
            crate::backbone::MlpBackbone::new(cfg.architecture.clone(), &mut rng)?,
            cfg.prior_rate,
        ),
    }
}

/// Runs Adam on the objective for `cfg.iterations` steps.
pub fn train(cfg: &TrainConfig, mut on_record: impl FnMut(&TrainRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut posterior = init_posterior(cfg)?;
    let board = CheckerboardSpec::default();
    let data_rng = RngStream::new(cfg.seed, "train-data");
    let probe_rng = RngStream::new(cfg.seed, "probe");
    let mut adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&posterior.param_lengths());
    let chunks = cfg.batch.div_ceil(CHUNK_ROWS) as u64;
    let norm = cfg.batch as f64;
    let mut log = Vec::new();
    let mut best = posterior.clone();
    let mut best_iter = 0;
    let mut best_probe: Option<f64> = None;
    let mut recent: Vec<f64> = Vec::new();

    for it in 0..cfg.iterations {
        let beta_t = match cfg.mode {
            TrainMode::Fmwc => kl_schedule(it, cfg.iterations, cfg.kl_cycles, cfg.warmup_fraction, cfg.kl_weight),
            _ => 0.0,
        };
        let parts = try_map_chunks(cfg.batch, CHUNK_ROWS, |c, start, end| {
            let mut rng = data_rng.fork(it as u64 * chunks + c as u64);
            let rows = end - start;
            let batch = Batch::draw(rows, &board, &mut rng)?;
            let noise = match cfg.mode {
                TrainMode::Fmwc => BatchNoise::Weights(posterior.draw_noise_block(rows, &mut rng)),
                TrainMode::Fm => BatchNoise::None,
                TrainMode::McDropout { p } => {
                    BatchNoise::Dropout(DropoutMasks::draw_block(posterior.config(), p, rows, &mut rng))
                }
            };
            elbo_loss(&posterior, &batch, beta_t, noise, norm)
        })?;
        let mut parts = parts.into_iter();
        let (first_val, mut grad) = parts.next().expect("batch is nonempty");
        let mut value = first_val;
        for (v, g) in parts {
            value.loss += v.loss;
            value.regression += v.regression;
            value.kl += v.kl;
            grad.add_assign(&g)?;
        }
        if !value.loss.is_finite() || value.loss > 1e6 {
            recent.push(value.loss);
            return Err(Error::Diverged {
                iteration: it,
                detail: format!(
                    "loss {} (regression {}, kl {}, beta_t {beta_t}); recent losses {:?}; parameters finite: {}",
                    value.loss,
                    value.regression,
                    value.kl,
                    &recent[recent.len().saturating_sub(10)..],
                    posterior.backbone().all_finite()
                ),
            });
        }
        recent.push(value.loss);
        if recent.len() > 64 {
            recent.drain(..32);
        }
        adam.lr = learning_rate(cfg, it);
        {
            let grads = grad.slices();
            let mut params = posterior.param_slices_mut();
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }

        let done = it + 1;
        let probe_now = cfg.probe_every > 0 && (done % cfg.probe_every == 0 || done == cfg.iterations);
        let mut probe = None;
        if probe_now {
            let m = probe_misplacement(&posterior, cfg, &probe_rng)?;
            if best_probe.is_none_or(|b| m < b) {
                best_probe = Some(m);
                best = posterior.clone();
                best_iter = done;
            }
            probe = Some(m);
        }
        if it % cfg.log_every == 0 || probe.is_some() || done == cfg.iterations {
            let rec = TrainRecord {
                iter: it,
                regression_loss: value.regression,
                kl: value.kl,
                beta_t,
                misplacement_probe: probe,
            };
            on_record(&rec);
            log.push(rec);
        }
    }
    if cfg.probe_every == 0 {
        best = posterior.clone();
        best_iter = cfg.iterations;
    }
    Ok(TrainOutcome {
        last: posterior,
        best,
        best_iter,
        best_probe,
        log,
    })
}

/// Misplacement of MAP samples from a fixed set of probe noises.
pub fn probe_misplacement(posterior: &VadPosterior, cfg: &TrainConfig, probe_rng: &RngStream) -> Result<f64> {
    let mut rng = probe_rng.derive("x0");
    let mut x0 = Matrix::zeros(cfg.probe_samples, 2);
    rng.fill_normal(x0.as_mut_slice());
    let streams = sample_streams(probe_rng, 0, cfg.probe_samples);
    let field = MapField::new(posterior, cfg.closure);
    let recs = integrate(&field, &x0, cfg.probe_steps, Controller::Uniform, &streams)?;
    Ok(misplacement(&endpoints(&recs)))
}
