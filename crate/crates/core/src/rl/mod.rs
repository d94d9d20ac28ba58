//! Online PPO driven only by intrinsic rewards from a frozen pretrained bundle.

mod buffer;
mod policy;
mod ppo;
mod reward;
mod train;

pub use buffer::{gae, normalize_advantages, RolloutBuffer};
pub use policy::{
    argmax, entropy, policy_forward, sample_categorical, ExpertPolicy, GreedyPolicy, Policy, PolicyNet, PolicyOutput, RandomPolicy,
    POLICY_CHANNELS, POLICY_HIDDEN, POLICY_KERNEL,
};
pub use ppo::{policy_optimizer, ppo_loss, ppo_update, PpoBatch, PpoConfig, PpoLoss, PpoStats};
pub use reward::{
    score_transitions, RewardKind, RewardMode, RewardModel, RunningNormalizer, TransitionScores, NORMALIZER_VAR_FLOOR,
};
pub use train::{
    bundle_digest, evaluate, policy_entropy, read_curve_csv, train_rl, write_curve_csv, CurvePoint, EvalReport,
    RlConfig, RlOutcome,
};
