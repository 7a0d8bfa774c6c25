use std::path::Path;

use fvg_core::model::ModelConfig;
use fvg_core::sample::SampleConfig;
use fvg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Raised for unreadable, malformed or invalid configuration; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training videos; the held-out prompts come on top.
    pub n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 4096, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Sampler seeds per prompt for score-based studies.
    pub seeds: Vec<u64>,
    /// Step counts of the step-reduction study; the first is the reference.
    pub steps: Vec<usize>,
    /// Held-out prompts used (at most the number in the dataset).
    pub prompts: usize,
    /// Videos per mode for the Fréchet diagnostic.
    pub diagnostic_samples: usize,
    pub diversity_prompts: usize,
    pub diversity_videos: usize,
    pub sensitivity_prompts: usize,
    pub anchors_per_prompt: usize,
    pub proj_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            steps: vec![50, 30, 15],
            prompts: 64,
            diagnostic_samples: 256,
            diversity_prompts: 16,
            diversity_videos: 25,
            sensitivity_prompts: 32,
            anchors_per_prompt: 5,
            proj_seed: fvg_core::metrics::DEFAULT_PROJ_SEED,
        }
    }
}

/// The single JSON document accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub study: StudyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |what: &str, e: fvg_core::Error| ConfigError(format!("{what}: {e}"));
        self.model.validate().map_err(|e| wrap("model", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        self.sample.validate().map_err(|e| wrap("sample", e))?;
        if self.data.n == 0 {
            return Err(ConfigError("data.n must be at least 1".into()));
        }
        let s = &self.study;
        if s.seeds.is_empty() || s.steps.is_empty() || s.steps.contains(&0) {
            return Err(ConfigError("study.seeds and study.steps must be non-empty; steps must be positive".into()));
        }
        if s.prompts == 0 || s.diagnostic_samples < 2 || s.diversity_videos < 2 || s.anchors_per_prompt < 2 {
            return Err(ConfigError(
                "study.prompts must be positive; diagnostic_samples, diversity_videos and anchors_per_prompt at least 2"
                    .into(),
            ));
        }
        Ok(())
    }
}
