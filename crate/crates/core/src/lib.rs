//! Observation-only imitation: adversarially pretrained latent-transition
//! models that score state transitions, and a PPO learner driven purely by
//! those scores.

pub mod analysis;
pub mod checks;
pub mod env;
pub mod error;
pub mod models;
pub mod numerics;
pub mod pretrain;
pub mod rl;

pub use error::{Error, ErrorClass, Result};
pub use numerics::{DType, Graph, ParameterSet, Tensor, Var};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;
