//! `.fmwc.json` checkpoints.
//!
//! One JSON document: a manifest (schema version, model kind, architecture,
//! config hash, free-form metadata) followed by parameter arrays encoded as
//! base64 little-endian f64. Decoding is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Linear, MlpBackbone};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vad::{AlphaSource, InferenceNet, VadPosterior};

pub const SCHEMA_VERSION: u32 = 1;
pub const EXTENSION: &str = "fmwc.json";

/// What a checkpoint was trained as.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Deterministic flow matching.
    Fm,
    /// Variational field with learned dropout scales.
    Fmwc,
    /// Deterministic field trained with Bernoulli dropout on hidden units.
    McDropout { p: f64 },
    /// Independently trained deterministic members.
    Ensemble,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Fm => "fm",
            ModelKind::Fmwc => "fmwc",
            ModelKind::McDropout { .. } => "mc_dropout",
            ModelKind::Ensemble => "ensemble",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl StoredArray {
    fn encode(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, what: &str) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(self.data.as_bytes())
            .map_err(|e| Error::Corrupt(format!("{what}: bad base64 payload: {e}")))?;
        let want: usize = self.shape.iter().product();
        if bytes.len() != want * 8 {
            return Err(Error::Corrupt(format!(
                "{what}: array length {} bytes does not match shape {:?} ({} bytes)",
                bytes.len(),
                self.shape,
                want * 8
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredLinear {
    pub weight: StoredArray,
    pub bias: StoredArray,
}

impl StoredLinear {
    fn encode(l: &Linear) -> Self {
        Self {
            weight: StoredArray::encode(vec![l.inputs(), l.outputs()], l.weight.as_slice()),
            bias: StoredArray::encode(vec![l.outputs()], &l.bias),
        }
    }

    fn decode(&self, what: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        if self.weight.shape != [inputs, outputs] || self.bias.shape != [outputs] {
            return Err(Error::Corrupt(format!(
                "{what}: shapes {:?}/{:?}, expected [{inputs}, {outputs}]/[{outputs}]",
                self.weight.shape, self.bias.shape
            )));
        }
        let w = self.weight.decode(what)?;
        let bias = self.bias.decode(what)?;
        Ok(Linear {
            weight: Matrix::from_vec(inputs, outputs, w)?,
            bias,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StoredAlpha {
    Fixed { value: f64 },
    Learned { width: usize, nets: Vec<[StoredLinear; 2]> },
}

/// Parameters of one posterior (or one deterministic member).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredModel {
    pub layers: Vec<StoredLinear>,
    pub alpha: StoredAlpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub model: ModelKind,
    pub config_hash: String,
    pub architecture: BackboneConfig,
    pub prior_rate: f64,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub members: Vec<StoredModel>,
}

/// Emitted when a checkpoint was produced under a different configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigHashWarning {
    pub stored: String,
    pub expected: String,
}

impl std::fmt::Display for ConfigHashWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checkpoint config hash {} differs from current config {}",
            self.stored, self.expected
        )
    }
}

impl Checkpoint {
    pub fn from_posteriors(
        model: ModelKind,
        config_hash: impl Into<String>,
        meta: BTreeMap<String, serde_json::Value>,
        members: &[&VadPosterior],
    ) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("checkpoint needs at least one member".into()))?;
        let architecture = first.config().clone();
        let prior_rate = first.prior_rate();
        let members = members
            .iter()
            .map(|p| {
                if p.config() != &architecture {
                    return Err(Error::InvalidArgument("ensemble members differ in architecture".into()));
                }
                let layers = p.backbone().layers().iter().map(StoredLinear::encode).collect();
                let alpha = match p.alpha_source() {
                    AlphaSource::Fixed(v) => StoredAlpha::Fixed { value: *v },
                    AlphaSource::Learned(nets) => StoredAlpha::Learned {
                        width: nets.first().map_or(0, InferenceNet::width),
                        nets: nets
                            .iter()
                            .map(|n| [StoredLinear::encode(&n.hidden), StoredLinear::encode(&n.out)])
                            .collect(),
                    },
                };
                Ok(StoredModel { layers, alpha })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: SCHEMA_VERSION,
            model,
            config_hash: config_hash.into(),
            architecture,
            prior_rate,
            meta,
            members,
        })
    }

    /// Rebuilds every member.
    pub fn posteriors(&self) -> Result<Vec<VadPosterior>> {
        let cfg = &self.architecture;
        cfg.validate()?;
        self.members
            .iter()
            .enumerate()
            .map(|(m, stored)| {
                if stored.layers.len() != cfg.depth {
                    return Err(Error::Corrupt(format!(
                        "member {m}: {} layers, architecture has {}",
                        stored.layers.len(),
                        cfg.depth
                    )));
                }
                let layers = stored
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, s)| s.decode(&format!("member {m} layer {l}"), cfg.layer_in(l), cfg.layer_out(l)))
                    .collect::<Result<Vec<_>>>()?;
                let backbone = MlpBackbone::with_layers(cfg.clone(), layers)?;
                let alpha = match &stored.alpha {
                    StoredAlpha::Fixed { value } => AlphaSource::Fixed(*value),
                    StoredAlpha::Learned { width, nets } => {
                        if nets.len() != cfg.depth {
                            return Err(Error::Corrupt(format!("member {m}: {} inference nets", nets.len())));
                        }
                        AlphaSource::Learned(
                            nets.iter()
                                .enumerate()
                                .map(|(l, [h, o])| {
                                    let what = format!("member {m} inference net {l}");
                                    Ok(InferenceNet {
                                        hidden: h.decode(&what, cfg.layer_in(l), *width)?,
                                        out: o.decode(&what, *width, cfg.layer_out(l))?,
                                    })
                                })
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                };
                VadPosterior::new(backbone, alpha, self.prior_rate)
                    .map_err(|e| Error::Corrupt(format!("member {m}: {e}")))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("checkpoint is not JSON: {e}")))?;
        let found = value
            .get("schema")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt("checkpoint has no schema field".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                found: found as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("checkpoint manifest: {e}")))?;
        // Decode once so truncated payloads fail at load time.
        ckpt.posteriors()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// `Some` when the stored hash differs from `expected`.
    pub fn check_config_hash(&self, expected: &str) -> Option<ConfigHashWarning> {
        (self.config_hash != expected).then(|| ConfigHashWarning {
            stored: self.config_hash.clone(),
            expected: expected.to_string(),
        })
    }
}
