use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::buffer::RolloutBuffer;
use super::policy::{entropy, sample_categorical, GreedyPolicy, Policy, PolicyNet};
use super::ppo::{policy_optimizer, ppo_update, PpoConfig};
use super::reward::{RewardMode, RewardModel};
use crate::env::{Action, EnvConfig, GridEnv, ObservationState};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numerics::{hex_digest, DType};
use crate::Rng;

/// Everything that defines an online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub env: EnvConfig,
    pub reward: RewardMode,
    #[serde(default)]
    pub ppo: PpoConfig,
    /// Environment-step budget.
    pub total_steps: usize,
    pub seed: u64,
    /// Evaluate every this many updates; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once an evaluation reaches this success rate.
    pub target_success: Option<f64>,
}

impl RlConfig {
    pub fn new(env: EnvConfig, reward: RewardMode) -> Self {
        Self {
            env,
            reward,
            ppo: PpoConfig::default(),
            total_steps: 200_000,
            seed: 0,
            eval_every: 10,
            eval_episodes: 20,
            target_success: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::Config("periodic evaluation needs eval_episodes >= 1".into()));
        }
        Ok(())
    }
}

/// Per-episode outcomes of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub successes: Vec<bool>,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn episodes(&self) -> usize {
        self.successes.len()
    }

    pub fn success_rate(&self) -> f64 {
        mean_std(self.successes.iter().map(|&s| s as u8 as f64)).0
    }

    pub fn success_std(&self) -> f64 {
        mean_std(self.successes.iter().map(|&s| s as u8 as f64)).1
    }

    pub fn mean_return(&self) -> f64 {
        mean_std(self.returns.iter().copied()).0
    }

    pub fn return_std(&self) -> f64 {
        mean_std(self.returns.iter().copied()).1
    }
}

/// Seeds for evaluation episodes are drawn from their own stream so they
/// never coincide with the training stream of the same run seed.
const EVAL_STREAM: u64 = 0x5eed_e7a1;

/// Run `episodes` full episodes and record task success and return.
pub fn evaluate(policy: &mut dyn Policy, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("evaluate", "episodes must be >= 1"));
    }
    let mut seeds = Rng::seed_from_u64(seed);
    seeds.set_stream(EVAL_STREAM);
    let mut e = GridEnv::new(env.clone())?;
    let mut report = EvalReport {
        successes: Vec::with_capacity(episodes),
        returns: Vec::with_capacity(episodes),
        lengths: Vec::with_capacity(episodes),
    };
    for _ in 0..episodes {
        let mut obs = e.reset(seeds.gen());
        let (mut ret, mut success) = (0.0, false);
        while !e.is_done() {
            let a = policy.act(e.layout(), &obs)?;
            let out = e.step(a)?;
            ret += out.env_reward;
            success = out.success;
            obs = out.state;
        }
        report.successes.push(success);
        report.returns.push(ret);
        report.lengths.push(e.steps());
    }
    Ok(report)
}

/// One row of the learning curve. Evaluation columns are `NaN` on updates
/// without an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub env_steps: usize,
    pub mean_intrinsic_reward: f64,
    pub eval_success: f64,
    pub eval_return: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub policy: PolicyNet,
    pub curve: Vec<CurvePoint>,
    pub env_steps: usize,
    /// Digest of the reward bundle, identical before and after training.
    pub bundle_digest: String,
    pub reached_target: bool,
}

/// Digest over every bundle parameter.
pub fn bundle_digest(bundle: &ModelBundle) -> String {
    let joined: String = bundle.sets().iter().map(|s| s.fingerprint()).collect();
    hex_digest(joined.as_bytes())
}

struct Collector {
    env: GridEnv,
    obs: ObservationState,
    episode_seeds: Rng,
}

impl Collector {
    fn reset(&mut self) {
        self.obs = self.env.reset(self.episode_seeds.gen());
    }
}

/// Fill `buf` with `steps` transitions under the sampling policy; also
/// returns the raw `(current, next)` pixels for reward scoring.
fn collect(
    net: &PolicyNet,
    c: &mut Collector,
    steps: usize,
    rng: &mut Rng,
    buf: &mut RolloutBuffer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    buf.clear();
    let (mut cur_px, mut next_px) = (Vec::new(), Vec::new());
    // Index of each transition whose successor value must be looked up
    // separately: truncated episode ends and the final unfinished step.
    let mut boot: Vec<(usize, ObservationState)> = Vec::new();
    for t in 0..steps {
        let mut px = Vec::new();
        c.obs.write_normalized(&mut px);
        let (probs, values) = net.evaluate(&px, 1)?;
        let a = sample_categorical(&probs[0], rng);
        let action = Action::from_index(a).expect("head has COUNT outputs");
        buf.push(&c.obs, action, probs[0][a].max(f64::MIN_POSITIVE).ln(), values[0])?;
        let out = c.env.step(action)?;
        cur_px.extend_from_slice(&px);
        out.state.write_normalized(&mut next_px);
        buf.terminal.push(out.success);
        buf.episode_end.push(out.done);
        buf.next_values.push(0.0);
        if out.truncated || (!out.done && t + 1 == steps) {
            boot.push((t, out.state.clone()));
        }
        if out.done {
            c.reset();
        } else {
            c.obs = out.state;
        }
    }
    for t in 0..steps {
        if !buf.episode_end[t] && t + 1 < steps {
            buf.next_values[t] = buf.values[t + 1];
        }
    }
    if !boot.is_empty() {
        let mut px = Vec::new();
        for (_, s) in &boot {
            s.write_normalized(&mut px);
        }
        let (_, v) = net.evaluate(&px, boot.len())?;
        for ((t, _), v) in boot.iter().zip(v) {
            buf.next_values[*t] = v;
        }
    }
    Ok((cur_px, next_px))
}

/// PPO on intrinsic rewards from a frozen bundle. Task rewards are only
/// read by the evaluation episodes.
pub fn train_rl(config: &RlConfig, bundle: &ModelBundle, out_dir: Option<&Path>) -> Result<RlOutcome> {
    config.validate()?;
    let geometry = config.env.geometry();
    let mut rewards = RewardModel::new(bundle, config.reward, geometry)?;
    let digest = bundle_digest(bundle);

    let mut root = Rng::seed_from_u64(config.seed);
    let mut net = PolicyNet::init(geometry, root.gen(), DType::F32)?;
    let mut opt = policy_optimizer(&config.ppo, &net);
    let mut rng = Rng::seed_from_u64(root.gen());
    let eval_seed: u64 = root.gen();
    let mut c = Collector {
        env: GridEnv::new(config.env.clone())?,
        obs: ObservationState::from_frames(std::iter::empty()),
        episode_seeds: Rng::seed_from_u64(root.gen()),
    };
    c.reset();

    let mut buf = RolloutBuffer::default();
    let mut curve = Vec::new();
    let (mut steps, mut update, mut reached) = (0usize, 0usize, false);
    let abort = |net: &PolicyNet, step: usize, e: Error| -> Error {
        let checkpoint = out_dir.and_then(|d| {
            let p = d.join("policy_aborted.stgc");
            net.to_checkpoint().save(&p).ok().map(|_| p)
        });
        Error::TrainingAborted {
            step,
            reason: e.to_string(),
            checkpoint,
        }
    };
    while steps < config.total_steps {
        let n = config.ppo.rollout.min(config.total_steps - steps);
        let (cur, next) = collect(&net, &mut c, n, &mut rng, &mut buf).map_err(|e| abort(&net, steps, e))?;
        buf.rewards = rewards.rewards(&cur, &next, n).map_err(|e| abort(&net, steps, e))?;
        buf.compute_gae(config.ppo.gamma, config.ppo.lambda)
            .map_err(|e| abort(&net, steps, e))?;
        let stats = ppo_update(&buf, &mut net, &mut opt, &config.ppo, &mut rng).map_err(|e| abort(&net, steps, e))?;
        steps += n;
        update += 1;
        let mean_r = buf.rewards.iter().sum::<f64>() / n as f64;
        let mut point = CurvePoint {
            update,
            env_steps: steps,
            mean_intrinsic_reward: mean_r,
            eval_success: f64::NAN,
            eval_return: f64::NAN,
            entropy: stats.entropy,
        };
        let last = steps >= config.total_steps;
        if config.eval_every > 0 && (update % config.eval_every == 0 || last) {
            let r = evaluate(&mut GreedyPolicy(&net), &config.env, config.eval_episodes, eval_seed)?;
            point.eval_success = r.success_rate();
            point.eval_return = r.mean_return();
            if config.target_success.is_some_and(|t| point.eval_success >= t) {
                reached = true;
            }
        }
        curve.push(point);
        if reached {
            break;
        }
    }
    if bundle_digest(bundle) != digest {
        return Err(Error::Corrupt("reward bundle changed during training".into()));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        net.to_checkpoint().save(&d.join("policy.stgc"))?;
        write_curve_csv(&d.join("curve.csv"), &curve)?;
    }
    Ok(RlOutcome {
        policy: net,
        curve,
        env_steps: steps,
        bundle_digest: digest,
        reached_target: reached,
    })
}

/// Probability-weighted mean entropy of the policy on the given states.
pub fn policy_entropy(net: &PolicyNet, states: &[ObservationState]) -> Result<f64> {
    let mut px = Vec::new();
    for s in states {
        s.write_normalized(&mut px);
    }
    let (probs, _) = net.evaluate(&px, states.len())?;
    Ok(probs.iter().map(|p| entropy(p)).sum::<f64>() / states.len() as f64)
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let err = |line: u64, e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    if curve.is_empty() {
        w.write_record([
            "update",
            "env_steps",
            "mean_intrinsic_reward",
            "eval_success",
            "eval_return",
            "entropy",
        ])
        .map_err(|e| err(0, e))?;
    }
    for (i, p) in curve.iter().enumerate() {
        w.serialize(p).map_err(|e| err(i as u64 + 2, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    crate::numerics::write_atomic(path, &bytes)
}

pub fn read_curve_csv(path: &PathBuf) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        out.push(row.map_err(|e: csv::Error| Error::Csv {
            path: path.clone(),
            line: i as u64 + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
