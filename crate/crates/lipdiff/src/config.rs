//! Experiment configuration: a TOML file with namespaced sections
//! (`schedule.*`, `audio.*`, `model.*`, `train.*`, `autoencoder.*`,
//! `sampler.*`), unknown keys rejected, plus `section.key=value` overrides
//! layered on top. A run is identified by the SHA-256 of its resolved
//! configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::denoiser::DenoiserConfig;
use crate::error::hex_string;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::{ScheduleConfig, ScheduleKind};
use crate::trainer::{OptimizerKind, TrainerConfig};
use crate::CONTEXT_DIM;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: String,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            steps: 200,
            kind: "linear".into(),
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioSection {
    /// Feature backend key; only `filterbank29` is built in.
    pub backend: String,
    /// Temporal filter kind; the convolutional variant of the second
    /// smoothing stage is reserved but not implemented.
    pub filter_kind: String,
}

impl Default for AudioSection {
    fn default() -> Self {
        AudioSection {
            backend: "filterbank29".into(),
            filter_kind: "attention".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub cross_attn_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub context_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelSection {
            base_width: d.base_width,
            channel_mults: d.channel_mults,
            res_blocks: d.res_blocks,
            cross_attn_levels: d.cross_attn_levels,
            time_embed_dim: d.time_embed_dim,
            context_dim: d.context_dim,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub steps: usize,
    pub seed: u64,
    pub ckpt_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 8,
            lr: 1e-4,
            optimizer: "adam".into(),
            steps: 10_000,
            seed: 0,
            ckpt_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub factor: usize,
    pub image_size: usize,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            factor: 4,
            image_size: 256,
            width: 16,
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub clip_latents: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            steps: 200,
            eta: 0.0,
            seed: 0,
            clip_latents: false,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub audio: AudioSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub autoencoder: AutoencoderSection,
    pub sampler: SamplerSection,
}

impl ExperimentConfig {
    /// Defaults, optionally merged with a TOML file, then overridden by
    /// `section.key=value` pairs.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&raw)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        for ov in overrides {
            cfg = cfg.with_override(ov)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `section.key=value` override by editing the TOML tree and
    /// re-parsing (so unknown keys and type errors are rejected the same
    /// way as in a file).
    pub fn with_override(&self, spec: &str) -> Result<Self> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let mut parts = path.split('.');
        let (section, key) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(k), None) => (s.trim(), k.trim()),
            _ => {
                return Err(Error::Config(format!(
                    "override key `{path}` must be section.key"
                )))
            }
        };
        let mut tree: toml::Table = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        let sec = tree
            .get_mut(section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
        if !sec.contains_key(key) {
            return Err(Error::Config(format!(
                "unknown config key `{section}.{key}`"
            )));
        }
        let parsed: toml::Value = match &sec[key] {
            toml::Value::Integer(_) => toml::Value::Integer(
                value
                    .trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{path}: {e}")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                value
                    .trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{path}: {e}")))?,
            ),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                value
                    .trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{path}: {e}")))?,
            ),
            toml::Value::String(_) => toml::Value::String(value.trim().to_string()),
            toml::Value::Array(_) => {
                let items: std::result::Result<Vec<i64>, _> = value
                    .trim()
                    .trim_start_matches('[')
                    .trim_end_matches(']')
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse())
                    .collect();
                toml::Value::Array(
                    items
                        .map_err(|e| Error::Config(format!("{path}: {e}")))?
                        .into_iter()
                        .map(toml::Value::Integer)
                        .collect(),
                )
            }
            other => {
                return Err(Error::Config(format!(
                    "override of {path} ({}) not supported",
                    other.type_str()
                )))
            }
        };
        sec.insert(key.to_string(), parsed);
        let text = toml::to_string(&tree).map_err(|e| Error::Config(format!("{e}")))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_config()?.validate()?;
        self.denoiser_config()?.validate()?;
        self.trainer_config()?.validate()?;
        if self.audio.backend != "filterbank29" {
            return Err(Error::Config(format!(
                "unknown audio backend `{}`",
                self.audio.backend
            )));
        }
        match self.audio.filter_kind.as_str() {
            "attention" => {}
            "conv" => {
                return Err(Error::Config(
                    "audio.filter_kind = \"conv\" is reserved but not implemented".into(),
                ))
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown audio.filter_kind `{other}`"
                )))
            }
        }
        if self.model.context_dim != CONTEXT_DIM {
            return Err(Error::Config(format!(
                "model.context_dim must be {CONTEXT_DIM}"
            )));
        }
        Ok(())
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig> {
        let kind = match self.schedule.kind.as_str() {
            "linear" => ScheduleKind::Linear,
            other => {
                return Err(Error::Config(format!("unknown schedule kind `{other}`")))
            }
        };
        Ok(ScheduleConfig {
            steps: self.schedule.steps,
            kind,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
        })
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        Ok(DenoiserConfig {
            base_width: self.model.base_width,
            channel_mults: self.model.channel_mults.clone(),
            res_blocks: self.model.res_blocks,
            cross_attn_levels: self.model.cross_attn_levels.clone(),
            time_embed_dim: self.model.time_embed_dim,
            context_dim: self.model.context_dim,
        })
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let optimizer = match self.train.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };
        Ok(TrainerConfig {
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            optimizer,
            total_steps: self.train.steps,
            seed: self.train.seed,
            ckpt_every: self.train.ckpt_every,
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            eta: self.sampler.eta,
            seed: self.sampler.seed,
            clip_latents: self.sampler.clip_latents,
        }
    }

    /// Canonical TOML serialization of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = sha2::Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex_string(&hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.schedule.steps, 200);
        assert_eq!(cfg.train.lr, 1e-4);
    }

    #[test]
    fn unknown_keys_in_file_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[schedule]\nsteps = 10\nbogus = 1\n").unwrap();
        assert!(matches!(
            ExperimentConfig::load(Some(&p), &[]).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::load(None, &["train.lr=0.002".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.002);
        let cfg = cfg.with_override("model.channel_mults=[1,2]").unwrap();
        assert_eq!(cfg.model.channel_mults, vec![1, 2]);
        assert!(matches!(
            cfg.with_override("train.bogus=1").unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            cfg.with_override("nothing.lr=1").unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn override_changes_hash() {
        let a = ExperimentConfig::default();
        let b = a.with_override("sampler.steps=50").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn conv_filter_kind_is_reserved() {
        let cfg = ExperimentConfig::load(None, &["audio.filter_kind=conv".into()]);
        assert!(matches!(cfg.unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let cfg = ExperimentConfig::default()
            .with_override("train.steps=123")
            .unwrap();
        std::fs::write(&p, cfg.to_toml()).unwrap();
        let back = ExperimentConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(back.train.steps, 123);
        assert_eq!(back.hash(), cfg.hash());
    }
}
