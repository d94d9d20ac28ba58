use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::buffer::{normalize_advantages, RolloutBuffer};
use super::policy::{policy_forward, PolicyNet};
use crate::env::Geometry;
use crate::error::{Error, Result};
use crate::numerics::{Graph, OptimizerConfig, OptimizerState, ParameterSet, Scalar, Var};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Environment steps per rollout.
    pub rollout: usize,
    pub epochs: usize,
    pub minibatch: usize,
    /// Global gradient-norm cap; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 2.5e-4,
            rollout: 512,
            epochs: 4,
            minibatch: 128,
            max_grad_norm: Some(0.5),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.clip > 0.0 && self.lr > 0.0) {
            return bad("clip ratio and learning rate must be positive".into());
        }
        if self.rollout == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("rollout, epochs and minibatch must be positive".into());
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative".into());
        }
        Ok(())
    }
}

/// Inputs of one surrogate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PpoBatch<'a> {
    pub pixels: &'a [f64],
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// `pi(a|s) / pi_old(a|s)` per sample.
    pub ratio: Var,
}

/// Clipped surrogate plus value MSE minus the entropy bonus.
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParameterSet,
    geometry: Geometry,
    batch: PpoBatch,
    cfg: &PpoConfig,
) -> Result<PpoLoss> {
    let n = batch.actions.len();
    if n == 0
        || [batch.old_log_probs.len(), batch.advantages.len(), batch.returns.len()]
            .iter()
            .any(|&l| l != n)
    {
        return Err(Error::invalid("ppo_loss", "empty or misaligned batch"));
    }
    let out = policy_forward(g, params, geometry, batch.pixels, n)?;
    let logp = g.gather_last(out.log_probs, batch.actions)?;
    let old = g.input_f64(&[n], batch.old_log_probs)?;
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let adv = g.input_f64(&[n], batch.advantages)?;
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = g.mul(clipped, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let m = g.mean(surrogate);
    let policy = g.scale(m, -1.0);
    let ret = g.input_f64(&[n], batch.returns)?;
    let value = g.mse(out.values, ret)?;
    let probs = g.exp(out.log_probs);
    let plogp = g.mul(probs, out.log_probs)?;
    let row = g.sum_last(plogp)?;
    let m = g.mean(row);
    let entropy = g.scale(m, -1.0);
    let total = g.weighted_sum(&[(1.0, policy), (cfg.value_coef, value), (-cfg.entropy_coef, entropy)])?;
    Ok(PpoLoss {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

/// Averages over every minibatch of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left the clip range.
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// Several epochs of shuffled minibatch updates on a rollout whose
/// advantages are already computed.
pub fn ppo_update(
    buffer: &RolloutBuffer,
    net: &mut PolicyNet,
    opt: &mut OptimizerState,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    let n = buffer.len();
    if buffer.advantages.len() != n || n == 0 {
        return Err(Error::invalid("ppo_update", "advantages not computed"));
    }
    let mut adv = buffer.advantages.clone();
    normalize_advantages(&mut adv);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut clipped = 0usize;
    let mut seen = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let pixels = buffer.pixels(idx);
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let actions: Vec<usize> = idx.iter().map(|&i| buffer.actions[i]).collect();
            let (old, a, r) = (pick(&buffer.log_probs), pick(&adv), pick(&buffer.returns));
            let batch = PpoBatch {
                pixels: &pixels,
                actions: &actions,
                old_log_probs: &old,
                advantages: &a,
                returns: &r,
            };
            let mut g = Graph::<f32>::new();
            let loss = ppo_loss(&mut g, &net.params, net.geometry, batch, cfg)?;
            let ratios = g.values_f64(loss.ratio);
            if ratios.iter().any(|r| !r.is_finite()) {
                return Err(Error::NonFinite { op: "ppo ratio".into() });
            }
            clipped += ratios.iter().filter(|&&r| (r - 1.0).abs() > cfg.clip).count();
            seen += ratios.len();
            let grads = g.backward(loss.total)?;
            net.params.zero_grad();
            net.params.accumulate(&g, &grads);
            if let Some(max) = cfg.max_grad_norm {
                let norm = net.params.grad_norm();
                if norm > max {
                    net.params.scale_grads(max / norm);
                }
            }
            opt.step(&mut net.params)?;
            stats.policy_loss += g.scalar(loss.policy);
            stats.value_loss += g.scalar(loss.value);
            stats.entropy += g.scalar(loss.entropy);
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.clip_fraction = clipped as f64 / seen as f64;
    Ok(stats)
}

pub fn policy_optimizer(cfg: &PpoConfig, net: &PolicyNet) -> OptimizerState {
    OptimizerState::new(OptimizerConfig::adam(cfg.lr), &net.params)
}
