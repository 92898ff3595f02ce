//! JSON run configuration shared by `train`, `generate` and `decompose`.
//!
//! Every field has a default, unknown keys are rejected, and [`RunConfig::validate`]
//! runs before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{LossConfig, ModelConfig, SamplerConfig, Schedule};
use crate::error::{HimatError, Result};
use crate::material::CodecMode;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Unconditional / prompt-conditioned generation of map stacks.
    #[default]
    Generate,
    /// Photo latent in, intrinsic layers out.
    Decompose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub factor: usize,
    /// Ignored in lossless mode, where it is `3 f^2`.
    pub channels: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { mode: CodecMode::Lossy, factor: 4, channels: 16, train_steps: 300, batch: 256, lr: 1e-2, seed: 2 }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        match self.mode {
            CodecMode::Lossless => 3 * self.factor * self.factor,
            CodecMode::Lossy => self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Number of training items.
    pub size: usize,
    /// Held-out items generated after the training ones.
    pub validation: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { seed: 0, size: 64, validation: 16 }
    }
}

/// One progressive-resolution stage: train at a `latent x latent` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub latent: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub codec: CodecConfig,
    pub dataset: DatasetConfig,
    pub stages: Vec<Stage>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub freeze_crossstitch: bool,
    pub sampler: SamplerConfig,
    pub output: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Generate,
            model: ModelConfig::default(),
            schedule: Schedule::RectifiedFlow,
            loss: LossConfig::default(),
            codec: CodecConfig::default(),
            dataset: DatasetConfig::default(),
            stages: vec![Stage { latent: 16, steps: 200 }, Stage { latent: 32, steps: 50 }],
            optimizer: AdamConfig::default(),
            batch_size: 4,
            freeze_crossstitch: false,
            sampler: SamplerConfig::default(),
            output: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HimatError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HimatError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HimatError::InvalidConfig(m));
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.maps != crate::material::PACKED_MAPS {
            return bad(format!("the material pipeline produces {} maps, model expects {}", crate::material::PACKED_MAPS, self.model.maps));
        }
        if self.model.latent_channels != self.codec.latent_channels() {
            return bad(format!("model latent_channels {} != codec channels {}", self.model.latent_channels, self.codec.latent_channels()));
        }
        if (self.task == Task::Decompose) != self.model.conditional {
            return bad("model.conditional must be true exactly when task is decompose".into());
        }
        if self.model.cond_vocab < 4 {
            return bad("cond_vocab must cover the four prompt families".into());
        }
        if self.codec.factor == 0 || self.codec.channels == 0 || self.codec.batch == 0 || !(self.codec.lr > 0.0) {
            return bad(format!("invalid codec config {:?}", self.codec));
        }
        if self.dataset.size == 0 {
            return bad("dataset.size must be positive".into());
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.latent < 2) {
            return bad("stages must be non-empty with latent >= 2".into());
        }
        if self.batch_size == 0 || self.sampler.steps == 0 {
            return bad("batch_size and sampler.steps must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("invalid optimizer {o:?}"));
        }
        Ok(())
    }

    /// Image side length for a stage.
    pub fn image_size(&self, stage: &Stage) -> usize {
        stage.latent * self.codec.factor
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn empty_document_means_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"blocks": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"codec": {"factor": 4, "extra": 1}}"#).is_err());
    }

    #[test]
    fn inconsistent_configs_rejected() {
        for doc in [
            r#"{"model": {"latent_channels": 8}}"#,
            r#"{"task": "decompose"}"#,
            r#"{"stages": []}"#,
            r#"{"optimizer": {"lr": 0}}"#,
            r#"{"model": {"ffn_kernel": 2}}"#,
            r#"{"loss": {"swt_levels": 0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(HimatError::InvalidConfig(_))), "{doc}");
        }
        RunConfig::from_json(r#"{"task": "decompose", "model": {"conditional": true}}"#).unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { batch_size: 5, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }
}
