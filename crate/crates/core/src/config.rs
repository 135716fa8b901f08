//! Single JSON configuration for a full pipeline run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::TrainConfig;
use crate::error::{Error, Result};
use crate::prototype::PrototypeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub dataset: PathBuf,
    pub predicates: PathBuf,
    pub entities: PathBuf,
    pub predictions: PathBuf,
    pub confusion: PathBuf,
    /// Pre-computed base embeddings. When absent the built-in featurizer is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Width of featurized base embeddings.
    pub dim: usize,
    pub seed: u64,
    /// Encoder output width; defaults to the base embedding width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projected_dim: Option<usize>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            seed: 0,
            projected_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Fraction of NA candidates promoted.
    pub k_g: f64,
    pub direction_constraint: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            k_g: 0.05,
            direction_constraint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScarcitySource {
    /// Scarcity counted on the dataset after transfer.
    #[default]
    Enhanced,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub t: f64,
    pub scarcity_source: ScarcitySource,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            t: 3e7,
            scarcity_source: ScarcitySource::Enhanced,
        }
    }
}

/// Optional externally measured metrics folded into the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Ranked triplet predictions (JSONL) to score against the enhanced dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranked: Option<PathBuf>,
    pub k: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prototype: PrototypeConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub resample: ResampleConfig,
    #[serde(default)]
    pub audit: AuditConfig,
}

impl PipelineConfig {
    /// Reads a config file; relative input paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let inputs = &mut self.inputs;
        fix(&mut inputs.dataset);
        fix(&mut inputs.predicates);
        fix(&mut inputs.entities);
        fix(&mut inputs.predictions);
        fix(&mut inputs.confusion);
        if let Some(p) = inputs.embeddings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.audit.ranked.as_mut() {
            fix(p);
        }
    }

    /// Replaces the global seed; stage seeds are derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Training parameters with the seed derived from the global seed.
    pub fn train_params(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed ^ self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.dim < 2 {
            return Err(Error::Config(format!(
                "embedding.dim = {} must be >= 2",
                self.embedding.dim
            )));
        }
        self.train.validate()?;
        if self.embedding.projected_dim == Some(0) {
            return Err(Error::Config("embedding.projected_dim must be positive".into()));
        }
        self.prototype.validate()?;
        if !(0.0..=1.0).contains(&self.transfer.k_g) {
            return Err(Error::Config(format!(
                "transfer.k_g = {} outside [0, 1]",
                self.transfer.k_g
            )));
        }
        if !(self.resample.t > 0.0 && self.resample.t.is_finite()) {
            return Err(Error::Config(format!(
                "resample.t = {} must be positive",
                self.resample.t
            )));
        }
        if self.audit.k.contains(&0) {
            return Err(Error::Config("audit.k entries must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let text = r#"{"inputs": {"dataset": "d.jsonl", "predicates": "p.json", "entities": "e.json",
            "predictions": "pred.jsonl", "confusion": "c.csv"}}"#;
        let mut c: PipelineConfig = serde_json::from_str(text).unwrap();
        c.resolve_paths(Path::new("/data"));
        c.validate().unwrap();
        assert_eq!(c.inputs.dataset, PathBuf::from("/data/d.jsonl"));
        assert_eq!(c.train.temperature, 0.05);
        assert_eq!(c.train.margin_degrees, 10.0);
        assert_eq!(c.prototype.gamma, 1.5);
        assert_eq!(c.prototype.beta, 0.9);
        assert_eq!(c.transfer.k_g, 0.05);
        assert_eq!(c.resample.t, 3e7);
    }

    #[test]
    fn nested_sections_and_unknown_keys() {
        let text = r#"{"inputs": {"dataset": "d", "predicates": "p", "entities": "e",
            "predictions": "x", "confusion": "c"}, "train": {"epochs": 3}, "embedding": {"projected_dim": 16}}"#;
        let c: PipelineConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.embedding.projected_dim, Some(16));
        let bad = text.replace("\"epochs\"", "\"epochz\"");
        assert!(serde_json::from_str::<PipelineConfig>(&bad).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let text = r#"{"inputs": {"dataset": "d", "predicates": "p", "entities": "e",
            "predictions": "x", "confusion": "c"}, "seed": 7}"#;
        let c: PipelineConfig = serde_json::from_str(text).unwrap();
        let again: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
