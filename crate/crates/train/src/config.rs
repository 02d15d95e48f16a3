use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toonbetween_model::ModelConfig;

/// Optimizer and schedule settings; read from TOML, every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Random-crop size; frames smaller than this are used whole.
    pub height: usize,
    pub width: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lambda_warp: f64,
    pub lambda_contour: f64,
    pub seed: u64,
    /// Exact number of optimizer steps per stage, overriding the epoch counts.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub validate_every: usize,
    pub checkpoint_every: usize,
    /// Stage 2 trains (and applies) the temporal network.
    pub temporal: bool,
    /// Cosine decay from `lr` to this value over the run; constant when unset.
    pub lr_final: Option<f64>,
    /// Learning-rate multipliers by parameter-name prefix, e.g. `"temporal." = 10.0`.
    pub lr_scale: BTreeMap<String, f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            height: 384,
            width: 576,
            stage1_epochs: 60,
            stage2_epochs: 100,
            lambda_warp: 0.5,
            lambda_contour: 0.01,
            seed: 0,
            max_steps: None,
            grad_clip: None,
            validate_every: 100,
            checkpoint_every: 1000,
            temporal: true,
            lr_final: None,
            lr_scale: BTreeMap::new(),
            model: ModelConfig::standard(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Learning rate for the update after `step` of `total` completed steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_final {
            Some(end) if total > 1 => {
                let x = step.min(total - 1) as f64 / (total - 1) as f64;
                end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * x).cos())
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.height < 8 || self.width < 8 {
            return bad("batch size and crop size must be positive (crop at least 8x8)");
        }
        if self.lambda_warp < 0.0 || self.lambda_contour < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.lr_final.is_some_and(|f| !(f >= 0.0 && f <= self.lr)) {
            return bad("lr_final must lie in [0, lr]");
        }
        if self.lr_scale.values().any(|f| !(*f > 0.0 && f.is_finite())) {
            return bad("lr_scale factors must be positive");
        }
        if self.validate_every == 0 || self.checkpoint_every == 0 {
            return bad("intervals must be positive");
        }
        Ok(())
    }
}
