//! Experiment configuration: one versioned JSON document covering every
//! stage, hashed so artifacts can be traced back to the exact settings
//! that produced them.

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::diffusion::{DenoiserConfig, DiffusionTrainConfig};
use crate::metrics::{ExtractorConfig, ExtractorTrainConfig};
use crate::scene::GeneratorConfig;
use crate::semantic::{SemanticConfig, SemanticTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    pub generator: GeneratorConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            generator: GeneratorConfig::default(),
            train_size: 4000,
            test_size: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct CodecSection {
    pub model: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct SemanticSection {
    pub model: SemanticConfig,
    pub train: SemanticTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct DiffusionSection {
    pub model: DenoiserConfig,
    pub train: DiffusionTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SampleSection {
    /// Guidance scale s.
    pub scale: f64,
    pub steps: usize,
    pub seed: u64,
    /// Sampler registry name; `None` picks ddpm at the full step count and
    /// ddim below it.
    pub sampler: Option<String>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            scale: 2.0,
            steps: 50,
            seed: 0,
            sampler: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    pub seed: u64,
    pub extractor: ExtractorConfig,
    pub extractor_train: ExtractorTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationSection {
    pub use_clip: bool,
    pub use_vae_cond: bool,
    pub use_height: bool,
    pub cfg_scales: Vec<f64>,
    pub height_noise_sigmas: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            use_clip: true,
            use_vae_cond: true,
            use_height: true,
            cfg_scales: vec![1.0, 2.0, 4.0, 8.0],
            height_noise_sigmas: vec![0.0, 0.2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSection,
    pub codec: CodecSection,
    pub semantic: SemanticSection,
    pub diffusion: DiffusionSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetSection::default(),
            codec: CodecSection::default(),
            semantic: SemanticSection::default(),
            diffusion: DiffusionSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema version {} not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dataset.train_size == 0 || self.dataset.test_size == 0 {
            return Err(ConfigError::Invalid(
                "dataset split sizes must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.diffusion.train.p_drop) {
            return Err(ConfigError::Invalid(format!(
                "p_drop = {} outside [0, 1]",
                self.diffusion.train.p_drop
            )));
        }
        if self.sample.steps == 0 || self.sample.steps > self.diffusion.train.t_count {
            return Err(ConfigError::Invalid(format!(
                "sample.steps = {} outside [1, {}]",
                self.sample.steps, self.diffusion.train.t_count
            )));
        }
        if self.ablation.cfg_scales.is_empty() {
            return Err(ConfigError::Invalid("cfg_scales must be non-empty".into()));
        }
        Ok(())
    }

    /// Stable hex digest of the canonical JSON encoding; stamped onto every
    /// artifact this config produces.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}
