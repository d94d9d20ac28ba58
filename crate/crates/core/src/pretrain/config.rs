use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::Geometry;
use crate::error::{Error, Result};
use crate::models::ModelConfig;

/// Every knob of an offline pretraining run. Missing keys take defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Weight of the next-embedding MSE.
    pub alpha: f64,
    /// Weight of the adversarial generator loss.
    pub beta: f64,
    /// Weight of the temporal-distance regression loss.
    pub kappa: f64,
    /// Windows per epoch buffer.
    pub batch_size: usize,
    /// States per window.
    pub seq_len: usize,
    /// Temporal-distance pairs per epoch.
    pub tdr_batch: usize,
    pub critic_lr: f64,
    pub generator_lr: f64,
    pub weight_decay: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// More than one path selects multi-task mode.
    pub datasets: Vec<PathBuf>,
    pub checkpoint_every: usize,
    pub d: usize,
    pub block_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub spectral_norm: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            kappa: 0.1,
            batch_size: 16,
            seq_len: 4,
            tdr_batch: 32,
            critic_lr: 1e-4,
            generator_lr: 1e-4,
            weight_decay: 0.01,
            clip_lo: -0.01,
            clip_hi: 0.01,
            critic_steps: 1,
            epochs: 200,
            seed: 0,
            datasets: Vec::new(),
            checkpoint_every: 50,
            d: 64,
            block_size: 16,
            layers: 2,
            heads: 2,
            spectral_norm: false,
        }
    }
}

impl PretrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.alpha, self.beta, self.kappa].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad(format!(
                "loss weights must be finite and >= 0 (alpha={}, beta={}, kappa={})",
                self.alpha, self.beta, self.kappa
            ));
        }
        if !(self.clip_lo < 0.0 && self.clip_hi > 0.0) || self.clip_lo != -self.clip_hi {
            return bad(format!("clip bounds ({}, {}) must be symmetric around 0", self.clip_lo, self.clip_hi));
        }
        if self.batch_size == 0 || self.tdr_batch == 0 || self.critic_steps == 0 {
            return bad("batch sizes and critic steps must be positive".into());
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len {} < 2: windows need at least one transition", self.seq_len));
        }
        if self.seq_len - 1 > self.block_size {
            return bad(format!("seq_len {} needs block_size >= {}", self.seq_len, self.seq_len - 1));
        }
        if !(self.critic_lr > 0.0 && self.generator_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn is_multitask(&self) -> bool {
        self.datasets.len() > 1
    }

    /// Architecture for data of the given geometry; multi-task runs double
    /// the layer count.
    pub fn model_config(&self, geometry: Geometry) -> ModelConfig {
        ModelConfig {
            d: self.d,
            block_size: self.block_size,
            layers: if self.is_multitask() { 2 * self.layers } else { self.layers },
            heads: self.heads,
            clip: self.clip_hi,
            spectral_norm: self.spectral_norm,
            geometry,
        }
    }
}
