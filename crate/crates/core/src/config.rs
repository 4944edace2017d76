//! Run configuration: every module's settings in one TOML document.
//!
//! A file only needs the keys it changes; they are merged over the desk or
//! paper preset before parsing, so unknown keys are still rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugConfig;
use crate::downstream::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::remesh::RemeshConfig;
use crate::transformer::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Remeshed variants written per input by `preprocess`.
    pub variants: usize,
    pub remesh: RemeshConfig,
    pub aug: AugConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub classify: FinetuneConfig,
    pub segment: FinetuneConfig,
    pub probe: FinetuneConfig,
}

impl RunConfig {
    /// Reduced model and short schedules for synthetic data on a CPU.
    pub fn desk() -> Self {
        let classify = FinetuneConfig { epochs: 20, lr: 5e-4, batch_size: 8, ..FinetuneConfig::classification() };
        Self {
            seed: 0,
            variants: 1,
            remesh: RemeshConfig::default(),
            aug: AugConfig::default(),
            model: ModelConfig::desk(),
            pretrain: PretrainConfig::desk(),
            segment: FinetuneConfig { epochs: 30, lr: 3e-4, batch_size: 4, milestones: vec![], ..FinetuneConfig::segmentation() },
            probe: FinetuneConfig { epochs: 100, lr: 1e-2, milestones: Vec::new(), ..classify.clone() },
            classify,
        }
    }

    pub fn paper() -> Self {
        Self {
            seed: 0,
            variants: 10,
            remesh: RemeshConfig::default(),
            aug: AugConfig { enable: true, ..AugConfig::default() },
            model: ModelConfig::paper(),
            pretrain: PretrainConfig::default(),
            classify: FinetuneConfig::classification(),
            segment: FinetuneConfig::segmentation(),
            probe: FinetuneConfig::classification(),
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses `text` as overrides of `preset` and validates the result.
    pub fn from_toml(text: &str, preset: Preset) -> Result<Self, ConfigError> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, overrides);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::Invalid(format!("seed {} above {} does not fit a TOML integer", self.seed, i64::MAX)));
        }
        if !(1..=100).contains(&self.variants) {
            return Err(ConfigError::Invalid(format!("variants {} outside 1..=100", self.variants)));
        }
        self.remesh.validate().map_err(|e| invalid(&e))?;
        self.aug.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.pretrain.validate().map_err(|e| invalid(&e))?;
        for (name, f) in [("classify", &self.classify), ("segment", &self.segment), ("probe", &self.probe)] {
            f.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::PosStrategy;

    #[test]
    fn presets_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml(), Preset::Desk).unwrap(), c);
        }
    }

    #[test]
    fn partial_file_overrides_preset() {
        let c = RunConfig::from_toml("seed = 7\n[model]\npos_strategy = \"a_learnable\"\n[pretrain]\nmask_ratio = 0.75\n", Preset::Paper).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.pos_strategy, PosStrategy::Learnable);
        assert_eq!(c.model.embed_dim, 768);
        assert_eq!(c.pretrain.mask_ratio, 0.75);
        assert_eq!(c.pretrain.batch_size, 32);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1", Preset::Desk), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nwidth = 3", Preset::Desk), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[pretrain]\nmask_ratio = 1.5", Preset::Desk), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[aug]\nffd_magnitude = -1.0", Preset::Desk), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[remesh]\nmin_faces = 300", Preset::Desk), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("variants = 0", Preset::Desk), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
