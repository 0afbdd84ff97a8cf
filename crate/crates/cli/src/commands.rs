use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fmwc::backbone::checkpoint::{Checkpoint, ModelKind};
use fmwc::confidence::{fit_head, head_features, score_record, Readout, HEAD_FEATURES};
use fmwc::diagnostics::{divergence_correlation_report, divergence_fd_batch, flops_sweep, FD_STEP};
use fmwc::evalbench::experiments::{
    base_noise, baseline_run, controller_comparison, editing_experiment, filtering_from_records, map_trajectories,
    split_indices, Baseline, ReportRow,
};
use fmwc::evalbench::{kde_symmetric_kl, misplacement, misplacement_labels, CheckerboardSpec};
use fmwc::numerics::{flops, Matrix, RngStream};
use fmwc::par::CHUNK_ROWS;
use fmwc::sampler::{
    endpoints, integrate, sample_streams, Controller, DropoutField, MapField, StochasticField, TrajectoryRecord,
    VelocityField,
};
use fmwc::training::{config_hash, train, TrainMode, TrainRecord};
use fmwc::vad::VadPosterior;
use fmwc::Error;

use crate::artifacts::{num, read_table, write_report, write_table, ParsedTable, Provenance, ARTIFACT_SCHEMA};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::figures;

pub const CHECKPOINT_FILE: &str = "model.fmwc.json";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fm,
    Fmwc,
    McDropout,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (`run.json`).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.mode`.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Dropout rate for `--mode mc-dropout`.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Train this many members with seeds `seed, seed+1, ...` and store
    /// them as one ensemble checkpoint.
    #[arg(long, default_value_t = 1)]
    pub members: usize,
    /// Output directory (defaults to `output_dir` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Euler steps (defaults to `sampler.steps`).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of samples (defaults to `sampler.samples`).
    #[arg(long)]
    pub n: Option<usize>,
    /// `map`, `stochastic`, `mean_k<K>` or `mc_dropout`.
    #[arg(long)]
    pub decoder: Option<String>,
    /// `uniform`, `naive_ema` or `online`.
    #[arg(long)]
    pub controller: Option<String>,
    /// Ensemble member to sample from.
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    /// Also write every step's state, mean, variance and step size.
    #[arg(long)]
    pub dump_trajectories: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Directory written by `generate`.
    #[arg(long)]
    pub run: PathBuf,
    /// Windows come from this config instead of the run's `run.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fit the L1 logistic head on half of the samples and score all.
    #[arg(long)]
    pub fit_head: bool,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub n: Option<usize>,
    /// Also write the lowest-scoring fraction of samples to `kept.csv`.
    #[arg(long)]
    pub keep: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Full,
    X,
    Y,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 500)]
    pub edits: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = MaskArg::Full)]
    pub mask: MaskArg,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
    pub budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "uniform,naive_ema,online")]
    pub controllers: Vec<String>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Trajectories for the variance/divergence correlation.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub probes: Vec<usize>,
    #[arg(long, default_value_t = 1024)]
    pub reference: usize,
    #[arg(long, default_value_t = 500)]
    pub points: usize,
    /// Time of the spatial variance/divergence field.
    #[arg(long, default_value_t = 0.5)]
    pub field_t: f64,
    /// Cells per axis of the spatial field.
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory searched recursively for tables.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write SVG figures.
    #[arg(long)]
    pub figures: bool,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn training_mode(args: &TrainArgs, cfg: &RunConfig) -> Result<TrainMode, CliError> {
    if !(args.dropout > 0.0 && args.dropout < 1.0) {
        return Err(CliError::Usage(format!(
            "--dropout must be in (0, 1), got {}",
            args.dropout
        )));
    }
    Ok(match args.mode {
        None => cfg.train.mode,
        Some(Mode::Fm) => TrainMode::Fm,
        Some(Mode::Fmwc) => TrainMode::Fmwc,
        Some(Mode::McDropout) => TrainMode::McDropout { p: args.dropout },
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.train = cfg.train_config_for(training_mode(args, &cfg)?);
    if args.members == 0 {
        return Err(CliError::Usage("--members must be at least 1".into()));
    }
    cfg.train.validate()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out)?;

    let mut log: Vec<(usize, TrainRecord)> = Vec::new();
    let mut trained = Vec::new();
    let mut meta = BTreeMap::new();
    for m in 0..args.members {
        let mut tc = cfg.train.clone();
        tc.seed = cfg.seed + m as u64;
        let outcome = train(&tc, |r| {
            if let Some(p) = r.misplacement_probe {
                eprintln!(
                    "member {m} iter {}: loss {:.5} probe misplacement {:.4}",
                    r.iter, r.regression_loss, p
                );
            }
        })?;
        log.extend(outcome.log.iter().map(|r| (m, r.clone())));
        let key = |k: &str| {
            if args.members == 1 {
                k.to_string()
            } else {
                format!("member{m}_{k}")
            }
        };
        meta.insert(key("best_iter"), serde_json::json!(outcome.best_iter));
        meta.insert(key("best_probe"), serde_json::json!(outcome.best_probe));
        trained.push(outcome.best);
    }
    meta.insert("seed".into(), serde_json::json!(cfg.seed));
    meta.insert(
        "mode".into(),
        serde_json::to_value(cfg.train.mode).expect("mode serializes"),
    );
    let kind = match (args.members, cfg.train.mode) {
        (k, _) if k > 1 => ModelKind::Ensemble,
        (_, TrainMode::Fm) => ModelKind::Fm,
        (_, TrainMode::Fmwc) => ModelKind::Fmwc,
        (_, TrainMode::McDropout { p }) => ModelKind::McDropout { p },
    };
    let refs: Vec<&VadPosterior> = trained.iter().collect();
    let ckpt = Checkpoint::from_posteriors(kind, cfg.train.hash(), meta, &refs)?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    std::fs::write(out.join("run.json"), cfg.to_json())?;

    let prov = Provenance::new(cfg.hash(), cfg.seed);
    let rows = log.iter().map(|(m, r)| {
        vec![
            m.to_string(),
            r.iter.to_string(),
            num(r.regression_loss),
            num(r.kl),
            num(r.beta_t),
            r.misplacement_probe.map(num).unwrap_or_default(),
        ]
    });
    write_table(
        &out.join("train_log.csv"),
        &prov,
        "train_log",
        &[
            "member",
            "iter",
            "regression_loss",
            "kl",
            "beta_t",
            "misplacement_probe",
        ],
        rows,
    )?;
    eprintln!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// A checkpoint with the configuration it is run under.
struct Loaded {
    cfg: RunConfig,
    ckpt: Checkpoint,
    members: Vec<VadPosterior>,
    out: PathBuf,
    steps: usize,
    prov: Provenance,
}

impl Loaded {
    fn open(args: &ModelArgs) -> Result<Self, CliError> {
        let cfg = RunConfig::load_or_default(args.config.as_deref())?;
        if !args.checkpoint.is_file() {
            return Err(CliError::Usage(format!(
                "checkpoint {} not found",
                args.checkpoint.display()
            )));
        }
        let ckpt = Checkpoint::load(&args.checkpoint)?;
        if args.config.is_some() {
            let mode = match ckpt.meta.get("mode") {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| CliError::Corrupt(format!("checkpoint training mode: {e}")))?,
                None => match ckpt.model {
                    ModelKind::Fmwc => TrainMode::Fmwc,
                    ModelKind::McDropout { p } => TrainMode::McDropout { p },
                    ModelKind::Fm | ModelKind::Ensemble => TrainMode::Fm,
                },
            };
            if let Some(w) = ckpt.check_config_hash(&cfg.train_config_for(mode).hash()) {
                eprintln!("warning: {w}");
            }
        }
        let members = ckpt.posteriors()?;
        let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        create_dir(&out)?;
        let steps = args.steps.unwrap_or(cfg.sampler.steps);
        if steps == 0 {
            return Err(CliError::Usage("--steps must be at least 1".into()));
        }
        let prov = Provenance::new(config_hash(&(cfg.hash(), &ckpt.config_hash)), cfg.seed);
        std::fs::write(out.join("run.json"), cfg.to_json())?;
        Ok(Self {
            cfg,
            ckpt,
            members,
            out,
            steps,
            prov,
        })
    }

    fn kind(&self) -> &'static str {
        self.ckpt.model.name()
    }

    fn primary(&self) -> &VadPosterior {
        &self.members[0]
    }

    fn rng(&self, command: &str) -> RngStream {
        RngStream::new(self.cfg.seed, command)
    }
}

/// Per-state flops of one field call relative to the deterministic
/// forward, both on a block of `CHUNK_ROWS` states.
fn measured_ratio(field: &dyn VelocityField, posterior: &VadPosterior) -> Result<f64, CliError> {
    let x = base_noise(CHUNK_ROWS, field.dim(), &RngStream::new(0, "flops-probe"));
    let t = vec![0.5; CHUNK_ROWS];
    let mut rngs = sample_streams(&RngStream::new(0, "flops-probe-noise"), 0, CHUNK_ROWS);
    let (r, cost) = flops::measure(|| field.evaluate(&x, &t, &mut rngs));
    r?;
    let (r, base) = flops::measure(|| posterior.backbone().forward(&x, &t));
    r?;
    Ok(cost as f64 / base as f64)
}

fn coord_names(dim: usize, prefix: &str) -> Vec<String> {
    match dim {
        2 => vec![format!("{prefix}x"), format!("{prefix}y")],
        _ => (0..dim).map(|c| format!("{prefix}x{c}")).collect(),
    }
}

fn make_field<'a>(
    decoder: &str,
    posterior: &'a VadPosterior,
    kind: ModelKind,
    cfg: &RunConfig,
) -> Result<Box<dyn VelocityField + 'a>, CliError> {
    Ok(match decoder {
        "map" => Box::new(MapField::new(posterior, cfg.sampler.closure)),
        "stochastic" => Box::new(StochasticField::new(posterior, 1)?),
        "mc_dropout" => match kind {
            ModelKind::McDropout { p } => Box::new(DropoutField { posterior, p }),
            other => {
                return Err(CliError::Usage(format!(
                    "decoder mc_dropout needs a dropout-trained checkpoint, got {}",
                    other.name()
                )))
            }
        },
        d => match d.strip_prefix("mean_k").and_then(|k| k.parse().ok()) {
            Some(k) => Box::new(StochasticField::new(posterior, k)?),
            None => return Err(CliError::Usage(format!("unknown decoder '{d}'"))),
        },
    })
}

fn readout_cells(rec: &TrajectoryRecord, cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    [Readout::Endpoint, Readout::Integrated, Readout::TemporalRatio]
        .into_iter()
        .map(|r| Ok(num(score_record(rec, r, cfg.windows)?)))
        .collect()
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let run = Loaded::open(&args.model)?;
    let cfg = &run.cfg;
    let n = args.n.unwrap_or(cfg.sampler.samples);
    let decoder = args.decoder.as_deref().unwrap_or(&cfg.sampler.decoder);
    let controller = cfg.controller_for(args.controller.as_deref().unwrap_or(&cfg.sampler.controller))?;
    let posterior = run
        .members
        .get(args.member)
        .ok_or_else(|| CliError::Usage(format!("checkpoint has {} members", run.members.len())))?;
    let field = make_field(decoder, posterior, run.ckpt.model, cfg)?;
    let dim = field.dim();

    let rng = run.rng("generate");
    let x0 = base_noise(n, dim, &rng);
    let records = integrate(field.as_ref(), &x0, run.steps, controller, &sample_streams(&rng, 0, n))?;
    let ends = endpoints(&records);
    let labels = misplacement_labels(&ends);

    let mut cols: Vec<String> = vec!["id".into()];
    cols.extend(coord_names(dim, ""));
    cols.extend(["misplaced", "endpoint", "integrated", "temporal_ratio"].map(String::from));
    let mut rows = Vec::with_capacity(n);
    for (i, rec) in records.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(rec.endpoint.iter().map(|&v| num(v)));
        row.push(u8::from(labels[i]).to_string());
        row.extend(readout_cells(rec, cfg)?);
        rows.push(row);
    }
    let cols_ref: Vec<&str> = cols.iter().map(String::as_str).collect();
    write_table(&run.out.join("samples.csv"), &run.prov, "samples", &cols_ref, rows)?;

    let mut vcols: Vec<String> = ["id", "step", "t", "dt"].map(String::from).to_vec();
    vcols.extend(coord_names(dim, "var_"));
    let vrows = records.iter().enumerate().flat_map(|(i, rec)| {
        (0..rec.len()).map(move |s| {
            let mut row = vec![i.to_string(), s.to_string(), num(rec.times[s]), num(rec.steps[s])];
            row.extend(rec.variance(s).iter().map(|&v| num(v)));
            row
        })
    });
    let vcols_ref: Vec<&str> = vcols.iter().map(String::as_str).collect();
    write_table(&run.out.join("variance.csv"), &run.prov, "variance", &vcols_ref, vrows)?;

    if args.dump_trajectories {
        let mut tcols: Vec<String> = ["id", "step", "t", "dt"].map(String::from).to_vec();
        tcols.extend(coord_names(dim, ""));
        tcols.extend(coord_names(dim, "mu_"));
        tcols.extend(coord_names(dim, "var_"));
        let trows = records.iter().enumerate().flat_map(|(i, rec)| {
            (0..rec.len()).map(move |s| {
                let mut row = vec![i.to_string(), s.to_string(), num(rec.times[s]), num(rec.steps[s])];
                for part in [rec.state(s), rec.velocity(s), rec.variance(s)] {
                    row.extend(part.iter().map(|&v| num(v)));
                }
                row
            })
        });
        let tcols_ref: Vec<&str> = tcols.iter().map(String::as_str).collect();
        write_table(
            &run.out.join("trajectories.csv"),
            &run.prov,
            "trajectories",
            &tcols_ref,
            trows,
        )?;
    }

    let method = format!("{}_{}", run.kind(), field.tag());
    let ratio = measured_ratio(field.as_ref(), posterior)?;
    let mut report = Vec::new();
    if n > 0 {
        let row = |metric: &str, v: f64| ReportRow::new("quality", &method, controller.name(), metric, v, 1);
        report.push(row("misplacement", misplacement(&ends)).with_flops_ratio(ratio));
        match kde_symmetric_kl(&ends) {
            Ok(kl) => report.push(row("kde_kl", kl).with_flops_ratio(ratio)),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    write_report(&run.out.join("quality.csv"), &run.prov, "quality", &report)?;
    eprintln!("generated {n} samples into {}", run.out.display());
    Ok(())
}

fn open_table(path: &Path) -> Result<ParsedTable, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{} not found", path.display())));
    }
    read_table(path)?.ok_or_else(|| CliError::Corrupt(format!("{}: missing provenance header", path.display())))
}

/// Records rebuilt from `samples.csv` and `variance.csv`. Only what the
/// readouts use is restored: times, steps, variances and endpoints.
fn stored_records(dir: &Path) -> Result<(Vec<TrajectoryRecord>, Vec<bool>, Provenance), CliError> {
    let samples = open_table(&dir.join("samples.csv"))?;
    let var = open_table(&dir.join("variance.csv"))?;
    if samples.schema != ARTIFACT_SCHEMA || var.schema != ARTIFACT_SCHEMA {
        return Err(CliError::Corrupt(format!(
            "unsupported artifact schema in {}",
            dir.display()
        )));
    }
    if samples.prov != var.prov {
        return Err(CliError::Corrupt(
            "samples and variance come from different runs".into(),
        ));
    }
    let var_cols: Vec<usize> = var
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("var_"))
        .map(|(j, _)| j)
        .collect();
    let dim = var_cols.len();
    let coord_cols: Vec<usize> = coord_names(dim, "")
        .iter()
        .map(|c| samples.column(c))
        .collect::<Result<_, _>>()?;
    let mis = samples.column("misplaced")?;
    let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(samples.rows.len());
    let mut labels = Vec::with_capacity(samples.rows.len());
    for i in 0..samples.rows.len() {
        let endpoint = coord_cols
            .iter()
            .map(|&j| samples.float(i, j))
            .collect::<Result<_, _>>()?;
        labels.push(samples.rows[i][mis] == "1");
        records.push(TrajectoryRecord {
            dim,
            times: Vec::new(),
            states: Vec::new(),
            mean: Vec::new(),
            var: Vec::new(),
            steps: Vec::new(),
            endpoint,
            decoder: String::new(),
        });
    }
    let (id, t, dt) = (var.column("id")?, var.column("t")?, var.column("dt")?);
    for r in 0..var.rows.len() {
        let i: usize = var.rows[r][id]
            .parse()
            .map_err(|_| CliError::Corrupt("variance.csv: bad sample id".into()))?;
        let rec = records
            .get_mut(i)
            .ok_or_else(|| CliError::Corrupt(format!("variance.csv: sample {i} not in samples.csv")))?;
        rec.times.push(var.float(r, t)?);
        rec.steps.push(var.float(r, dt)?);
        for &j in &var_cols {
            rec.var.push(var.float(r, j)?);
        }
    }
    for rec in &mut records {
        rec.states = vec![0.0; rec.var.len()];
        rec.mean = vec![0.0; rec.var.len()];
        rec.validate()
            .map_err(|e| CliError::Corrupt(format!("stored trajectory: {e}")))?;
    }
    Ok((records, labels, samples.prov))
}

pub fn cmd_score(args: &ScoreArgs) -> Result<(), CliError> {
    let cfg_path = args.config.clone().unwrap_or_else(|| args.run.join("run.json"));
    let cfg = RunConfig::load(&cfg_path)?;
    let (records, labels, prov) = stored_records(&args.run)?;
    let mut cols = vec!["id", "endpoint", "integrated", "temporal_ratio"];
    let head = if args.fit_head {
        let (fit, _) = split_indices(records.len(), &RngStream::new(cfg.seed, "score"));
        let mut feats = Matrix::zeros(fit.len(), HEAD_FEATURES);
        for (r, &i) in fit.iter().enumerate() {
            feats
                .row_mut(r)
                .copy_from_slice(&head_features(&records[i], HEAD_FEATURES));
        }
        let fit_labels: Vec<bool> = fit.iter().map(|&i| labels[i]).collect();
        let head = fit_head(&feats, &fit_labels, &cfg.head)?;
        std::fs::write(
            args.run.join("head.json"),
            serde_json::to_string_pretty(&head).expect("head serializes") + "\n",
        )?;
        cols.push("learned");
        Some(head)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(readout_cells(rec, &cfg)?);
        if let Some(h) = &head {
            row.push(num(h.score(&head_features(rec, HEAD_FEATURES))?));
        }
        rows.push(row);
    }
    write_table(&args.run.join("scores.csv"), &prov, "scores", &cols, rows)?;
    Ok(())
}

fn keep_lowest(scores: &[f64], fraction: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let k = ((fraction * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

pub fn cmd_filter(args: &FilterArgs) -> Result<(), CliError> {
    if args.keep.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
        return Err(CliError::Usage("--keep must be in [0, 1]".into()));
    }
    let run = Loaded::open(&args.model)?;
    let cfg = &run.cfg;
    let n = args.n.unwrap_or(cfg.sampler.samples);
    let rng = run.rng("filter");
    let (rows, delivered, scores) = match run.ckpt.model {
        ModelKind::Fm | ModelKind::Fmwc => {
            let p = run.primary();
            let records = map_trajectories(p, n, run.steps, cfg.sampler.closure, Controller::Uniform, &rng)?;
            let res = filtering_from_records(&records, cfg.windows, &cfg.head, &rng)?;
            let ratio = measured_ratio(&MapField::new(p, cfg.sampler.closure), p)?;
            let mut rows: Vec<ReportRow> = res
                .rows(run.kind())
                .into_iter()
                .map(|r| r.with_flops_ratio(ratio))
                .collect();
            rows.push(
                ReportRow::new("quality", run.kind(), "map", "misplacement", res.misplacement, 1)
                    .with_flops_ratio(ratio),
            );
            let scores = records
                .iter()
                .map(|r| score_record(r, Readout::TemporalRatio, cfg.windows))
                .collect::<Result<Vec<_>, _>>()?;
            (rows, endpoints(&records), scores)
        }
        ModelKind::McDropout { p } => {
            let post = run.primary();
            let k = cfg.sampler.replicas;
            let res = baseline_run(&Baseline::McDropout { posterior: post, p, k }, n, run.steps, &rng)?;
            let ratio = k as f64 * measured_ratio(&DropoutField { posterior: post, p }, post)?;
            let rows = res.rows().into_iter().map(|r| r.with_flops_ratio(ratio)).collect();
            (rows, res.delivered.clone().expect("delivered samples"), res.dispersion)
        }
        ModelKind::Ensemble => {
            let members: Vec<&VadPosterior> = run.members.iter().collect();
            let k = members.len();
            let res = baseline_run(&Baseline::Ensemble { members }, n, run.steps, &rng)?;
            let rows = res.rows().into_iter().map(|r| r.with_flops_ratio(k as f64)).collect();
            (rows, res.delivered.clone().expect("delivered samples"), res.dispersion)
        }
    };
    write_report(&run.out.join("filtering.csv"), &run.prov, "filtering", &rows)?;
    if let Some(f) = args.keep {
        let kept = keep_lowest(&scores, f);
        let mut cols: Vec<String> = vec!["id".into()];
        cols.extend(coord_names(delivered.cols(), ""));
        cols.push("score".into());
        let rows = kept.iter().map(|&i| {
            let mut row = vec![i.to_string()];
            row.extend(delivered.row(i).iter().map(|&v| num(v)));
            row.push(num(scores[i]));
            row
        });
        let cols_ref: Vec<&str> = cols.iter().map(String::as_str).collect();
        write_table(&run.out.join("kept.csv"), &run.prov, "kept", &cols_ref, rows)?;
    }
    Ok(())
}

pub fn cmd_edit(args: &EditArgs) -> Result<(), CliError> {
    let run = Loaded::open(&args.model)?;
    let mask = match args.mask {
        MaskArg::Full => vec![1.0, 1.0],
        MaskArg::X => vec![1.0, 0.0],
        MaskArg::Y => vec![0.0, 1.0],
    };
    let res = editing_experiment(
        run.primary(),
        args.edits,
        run.steps,
        args.noise,
        &mask,
        run.cfg.sampler.closure,
        &run.rng("edit"),
    )?;
    let kind = run.kind();
    let rows = vec![
        ReportRow::new("editing", kind, "argmax", "success_rate", res.success_argmax, 1),
        ReportRow::new("editing", kind, "random", "success_rate", res.success_random, 1),
        ReportRow::new(
            "editing",
            kind,
            "argmax",
            "mean_displacement",
            res.mean_displacement_argmax,
            1,
        ),
        ReportRow::new(
            "editing",
            kind,
            "random",
            "mean_displacement",
            res.mean_displacement_random,
            1,
        ),
    ];
    write_report(&run.out.join("editing.csv"), &run.prov, "editing", &rows)?;
    Ok(())
}

pub fn cmd_adapt(args: &AdaptArgs) -> Result<(), CliError> {
    let run = Loaded::open(&args.model)?;
    let n = args.n.unwrap_or(run.cfg.sampler.samples);
    if args.budgets.contains(&0) {
        return Err(CliError::Usage("step budgets must be positive".into()));
    }
    let controllers = args
        .controllers
        .iter()
        .map(|c| run.cfg.controller_for(c))
        .collect::<Result<Vec<_>, _>>()?;
    let res = controller_comparison(
        run.primary(),
        n,
        &args.budgets,
        &controllers,
        run.cfg.sampler.closure,
        &run.rng("adapt"),
    )?;
    let rows: Vec<ReportRow> = res
        .iter()
        .map(|(c, nb, m)| ReportRow::new("adapt", c, &format!("N={nb}"), "misplacement", *m, 1))
        .collect();
    write_report(&run.out.join("adapt.csv"), &run.prov, "adapt", &rows)?;
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let run = Loaded::open(&args.model)?;
    if !(0.0..=1.0).contains(&args.field_t) || args.grid == 0 {
        return Err(CliError::Usage(
            "--field-t must be in [0, 1] and --grid positive".into(),
        ));
    }
    let p = run.primary();
    let closure = run.cfg.sampler.closure;
    let rng = run.rng("diagnose");
    let kind = run.kind();
    let mut rows = Vec::new();

    let corr = divergence_correlation_report(p, args.n, run.steps, closure, &rng)?;
    for (scoring, metric, v) in [
        ("integrated", "pearson", corr.integrated_pearson),
        ("integrated", "spearman", corr.integrated_spearman),
        ("per_step_mean", "pearson", corr.per_step_pearson_mean),
        ("per_step_mean", "spearman", corr.per_step_spearman_mean),
    ] {
        rows.push(ReportRow::new("divergence", kind, scoring, metric, v, 1));
    }

    let field = MapField::new(p, closure);
    let ratio = measured_ratio(&field, p)?;
    rows.push(ReportRow::new("cost", kind, "map", "flops_per_state", ratio, 1).with_flops_ratio(ratio));

    let sweep = flops_sweep(
        p,
        &args.probes,
        args.reference,
        args.points,
        run.steps,
        closure,
        &rng.derive("sweep"),
    )?;
    rows.push(ReportRow::new("hutchinson", kind, "variance", "spearman", sweep.fmwc_spearman, 1).with_flops_ratio(1.0));
    for r in &sweep.rows {
        let scoring = format!("K={}", r.probes);
        rows.push(
            ReportRow::new("hutchinson", "hutchinson", &scoring, "spearman", r.spearman, 1)
                .with_flops_ratio(r.flops_ratio_vs_fmwc),
        );
        rows.push(
            ReportRow::new("hutchinson", "hutchinson", &scoring, "pearson", r.pearson, 1)
                .with_flops_ratio(r.flops_ratio_vs_fmwc),
        );
    }
    write_report(&run.out.join("diagnose.csv"), &run.prov, "diagnose", &rows)?;

    // Spatial field on cell centres over the board.
    let board = CheckerboardSpec::default();
    let g = args.grid;
    let width = board.hi() - board.lo;
    let mut pts = Matrix::zeros(g * g, 2);
    for iy in 0..g {
        for ix in 0..g {
            let r = iy * g + ix;
            pts.set(r, 0, board.lo + (ix as f64 + 0.5) * width / g as f64);
            pts.set(r, 1, board.lo + (iy as f64 + 0.5) * width / g as f64);
        }
    }
    let times = vec![args.field_t; g * g];
    let (_, var) = field.evaluate(&pts, &times, &mut [])?;
    let div = divergence_fd_batch(&field, &pts, &times, FD_STEP)?;
    let frows = (0..g * g).map(|r| {
        vec![
            num(args.field_t),
            num(pts.get(r, 0)),
            num(pts.get(r, 1)),
            num(var.row(r).iter().sum::<f64>().sqrt()),
            num(div[r].abs()),
        ]
    });
    write_table(
        &run.out.join("field.csv"),
        &run.prov,
        "field",
        &["t", "x", "y", "std_norm", "abs_div"],
        frows,
    )?;
    Ok(())
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_csvs(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    if !args.run.is_dir() {
        return Err(CliError::Usage(format!(
            "run directory {} not found",
            args.run.display()
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let own = out.join(REPORT_FILE);
    let mut paths = Vec::new();
    collect_csvs(&args.run, &mut paths)?;
    let mut tables = Vec::new();
    for p in paths {
        if p == own {
            continue;
        }
        if let Some(t) = read_table(&p)? {
            tables.push(t);
        }
    }
    if tables.is_empty() {
        return Err(CliError::Usage(format!("no runs found in {}", args.run.display())));
    }
    if let Some(t) = tables.iter().find(|t| t.schema != ARTIFACT_SCHEMA) {
        return Err(CliError::Corrupt(format!(
            "refusing to merge {}: artifact schema {} (expected {ARTIFACT_SCHEMA})",
            t.path.display(),
            t.schema
        )));
    }
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    let mut seeds = Vec::new();
    for t in tables.iter().filter(|t| t.is_report()) {
        rows.extend(t.report_rows()?);
        hashes.push(t.prov.config_hash.clone());
        seeds.push(t.prov.seed.clone());
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "no runs found in {}: no report tables",
            args.run.display()
        )));
    }
    hashes.sort();
    hashes.dedup();
    seeds.sort();
    seeds.dedup();
    let seed = if seeds.len() == 1 {
        seeds[0].clone()
    } else {
        "mixed".into()
    };
    create_dir(&out)?;
    write_report(&own, &Provenance::new(config_hash(&hashes), seed), "report", &rows)?;
    print!("{}", render_text(&rows));

    if args.figures {
        let dir = out.join("figures");
        create_dir(&dir)?;
        let mut written = 0;
        if let Some(field) = tables.iter().find(|t| t.table == "field") {
            std::fs::write(dir.join("variance_divergence_field.svg"), figures::field_panels(field)?)?;
            written += 1;
        }
        if let Some(svg) = figures::auprc_bars(&rows) {
            std::fs::write(dir.join("auprc.svg"), svg)?;
            written += 1;
        }
        if let Some(svg) = figures::quality_vs_steps(&rows) {
            std::fs::write(dir.join("quality_vs_steps.svg"), svg)?;
            written += 1;
        }
        eprintln!("wrote {written} figures to {}", dir.display());
    }
    Ok(())
}

fn render_text(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.table.clone(),
                r.method.clone(),
                r.scoring.clone(),
                r.metric.clone(),
                format!("{:.4}", r.value),
                r.trajectories.to_string(),
                r.flops_ratio.map(|f| format!("{f:.2}x")).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let head = ["table", "method", "scoring", "metric", "value", "traj/sample", "flops"];
    let mut widths = head.map(str::len);
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.len());
        }
    }
    let line = |c: &[&str]| -> String {
        let parts: Vec<String> = c.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(&head);
    for c in &cells {
        s += &line(&c.each_ref().map(String::as_str));
    }
    s
}
