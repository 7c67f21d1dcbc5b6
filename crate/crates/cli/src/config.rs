use std::path::Path;

use portraitgan::encoder::EncoderTrainConfig;
use portraitgan::finetune::FinetuneConfig;
use portraitgan::inversion::InvertConfig;
use portraitgan::losses::{FeatureNetConfig, FeatureNetSource};
use portraitgan::pseudo_pairs::PairConfig;
use portraitgan::{Error, GeneratorConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Photo faces for pretraining and encoder training.
    pub faces: usize,
    /// Held-out photo portraits used by evaluation and studies.
    pub portraits: usize,
    pub style_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            faces: 512,
            portraits: 16,
            style_images: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub semantic_samples: usize,
    /// Generator samples compared against the style set by FID.
    pub fid_samples: usize,
    pub fid_psi: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            semantic_samples: 64,
            fid_samples: 64,
            fid_psi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Fine-tuning steps per study run.
    pub iterations: usize,
    /// Reference images inverted per space in `study ref-space`.
    pub references: usize,
    pub lambda_semantic_grid: Vec<f64>,
    pub lambda_paired_grid: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            references: 4,
            lambda_semantic_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            lambda_paired_grid: (0..=10).map(|i| i as f64 * 0.5).collect(),
        }
    }
}

/// Everything a subcommand reads. Sub-config seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub feature_nets: FeatureNetConfig,
    pub feature_source: FeatureNetSource,
    pub data: DataConfig,
    pub pretrain: FinetuneConfig,
    pub encoder: EncoderTrainConfig,
    pub finetune: FinetuneConfig,
    pub pairs: PairConfig,
    pub invert: InvertConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig::desk(),
            feature_nets: FeatureNetConfig::default(),
            feature_source: FeatureNetSource::Random,
            data: DataConfig::default(),
            pretrain: FinetuneConfig::pretrain(),
            encoder: EncoderTrainConfig::default(),
            finetune: FinetuneConfig::cartoon(),
            pairs: PairConfig::default(),
            invert: InvertConfig::default(),
            eval: EvalConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the top-level seed and re-derives every sub-config seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed.wrapping_add(1);
        self.encoder.seed = seed.wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.style_images == 0 || self.data.portraits < 2 {
            return Err(Error::Config("data needs style_images ≥ 1 and portraits ≥ 2".into()));
        }
        if self.eval.fid_samples < 2 || self.eval.semantic_samples == 0 {
            return Err(Error::Config("eval needs fid_samples ≥ 2 and semantic_samples ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.fid_psi) {
            return Err(Error::Config(format!("eval.fid_psi {} outside [0, 1]", self.eval.fid_psi)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_configs_fill_defaults() {
        let c: Config = serde_json::from_str(r#"{"seed": 3, "data": {"faces": 8}}"#).unwrap();
        assert_eq!(c.data.faces, 8);
        assert_eq!(c.data.style_images, 10);
        assert_eq!(c.finetune, FinetuneConfig::cartoon());
        assert!(serde_json::from_str::<Config>(r#"{"sed": 3}"#).is_err());
        let c = c.with_seed(9);
        assert_eq!((c.pretrain.seed, c.finetune.seed, c.encoder.seed), (9, 10, 11));
    }
}
