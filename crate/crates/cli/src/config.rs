//! The `run.json` document.

use std::path::{Path, PathBuf};

use fmwc::confidence::{HeadConfig, Windows};
use fmwc::moments::Closure;
use fmwc::sampler::{Controller, ControllerConfig};
use fmwc::training::{config_hash, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "FMWC_SEED";

/// Sampling defaults shared by `generate`, `filter`, `edit`, `adapt` and
/// `diagnose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub samples: usize,
    pub steps: usize,
    /// `map`, `stochastic`, `mean_k<K>` or `mc_dropout`.
    pub decoder: String,
    /// `uniform`, `naive_ema` or `online`.
    pub controller: String,
    pub closure: Closure,
    /// Replicas per sample for the dispersion baselines.
    pub replicas: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            samples: 10_000,
            steps: 50,
            decoder: "map".into(),
            controller: "uniform".into(),
            closure: Closure::default(),
            replicas: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream; copied into `train.seed`.
    pub seed: u64,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub controller: ControllerConfig,
    pub windows: Windows,
    pub head: HeadConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            sampler: SamplerSettings::default(),
            controller: ControllerConfig::default(),
            windows: Windows::default(),
            head: HeadConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `FMWC_SEED` and propagates the seed.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.resolve()
    }

    /// `load` when a path is given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => RunConfig::default().resolve(),
        }
    }

    fn resolve(mut self) -> Result<Self, CliError> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got '{s}'")))?;
        }
        self.train.seed = self.seed;
        self.controller_for(&self.sampler.controller)?;
        Ok(self)
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        config_hash(&c)
    }

    pub fn controller_for(&self, name: &str) -> Result<Controller, CliError> {
        let c = match name {
            "uniform" => Controller::Uniform,
            "naive_ema" | "naive" => self.controller.naive(),
            "online" => self.controller.online(),
            other => return Err(CliError::Usage(format!("unknown controller '{other}'"))),
        };
        c.validate()?;
        Ok(c)
    }

    /// `train` with `mode` applied; the deterministic baseline trains
    /// without the scale regularizer.
    pub fn train_config_for(&self, mode: TrainMode) -> TrainConfig {
        let mut t = self.train.clone();
        t.mode = mode;
        if mode == TrainMode::Fm {
            t.kl_weight = 0.0;
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
