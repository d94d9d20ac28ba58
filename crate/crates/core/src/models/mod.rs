//! Encoder, State-to-Go transformer, Wasserstein critic and temporal-distance regressor.

mod bundle;
mod critic;
mod encoder;
pub(crate) mod layers;
mod symlog;
mod tdr;
mod transformer;

use serde::{Deserialize, Serialize};

pub use bundle::{BundleManifest, ModelBundle};
pub use critic::{clip_critic_weights, critic, critic_score_bound, init_critic, spectral_normalize, CRITIC_HIDDEN};
pub use encoder::{encode, init_encoder, ENCODER_CHANNELS};
pub use symlog::symlog_distance;
pub use tdr::{init_tdr, tdr_predict, TDR_HIDDEN};
pub use transformer::{attention, init_transformer, stg_forward, MLP_RATIO};

use crate::env::Geometry;
use crate::error::{Error, Result};

/// Architecture shared by the four networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Positional table length; upper bound on transformer input length.
    pub block_size: usize,
    pub layers: usize,
    pub heads: usize,
    /// Critic parameters live in `[-clip, clip]`.
    pub clip: f64,
    /// Also cap critic weight spectral norms at 1 after each update.
    pub spectral_norm: bool,
    pub geometry: Geometry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            block_size: 16,
            layers: 2,
            heads: 2,
            clip: 0.01,
            spectral_norm: false,
            geometry: Geometry {
                height: 32,
                width: 32,
                frame_stack: 4,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("heads ({}) must divide d ({})", self.heads, self.d)));
        }
        if self.block_size == 0 || self.layers == 0 {
            return Err(Error::Config("block size and layer count must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip bound {} must be positive", self.clip)));
        }
        let g = self.geometry;
        if g.height < 8 || g.width < 8 || g.frame_stack == 0 {
            return Err(Error::Config(format!("unsupported frame geometry {g}")));
        }
        Ok(())
    }
}
