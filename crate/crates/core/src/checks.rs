//! Finite-difference verification of every training loss on tiny models.

use rand::SeedableRng;

use crate::env::{generate_expert_dataset, EnvConfig, ExpertDataset, Task};
use crate::error::Result;
use crate::models::{critic, encode, init_critic, init_encoder, init_tdr, init_transformer, stg_forward, ModelConfig};
use crate::numerics::{gradient_check, DType, GradCheckConfig, GradCheckReport, Graph, ParameterSet, Var};
use crate::pretrain::{loss_dis, loss_gen, loss_tdr, PretrainBatch, PretrainConfig, Transitions};
use crate::rl::{policy_forward, ppo_loss, PolicyNet, PpoBatch, PpoConfig};
use crate::Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.report.passed(GRADCHECK_TOLERANCE)
    }
}

fn tiny_env() -> EnvConfig {
    EnvConfig {
        task: Task::Chase,
        grid: 4,
        scale: 2,
        horizon: 16,
        seed: 3,
        frame_stack: 2,
    }
}

fn tiny_model(geometry: crate::env::Geometry) -> ModelConfig {
    ModelConfig {
        d: 8,
        block_size: 4,
        layers: 1,
        heads: 2,
        // A wide clip box keeps gradients through the critic well above
        // finite-difference round-off.
        clip: 0.5,
        geometry,
        ..ModelConfig::default()
    }
}

/// Windows and pairs from `ds` embedded with explicit parameter sets
/// `[encoder, transformer]`.
fn embed<T: crate::numerics::Scalar>(
    g: &mut Graph<T>,
    sets: &[ParameterSet],
    cfg: &ModelConfig,
    batch: &PretrainBatch,
) -> Result<(Transitions, Var, Var)> {
    let geo = cfg.geometry;
    let (b, n, d) = (batch.windows.len(), batch.seq_len, cfg.d);
    let x = g.input_f64(&[b * n, geo.frame_stack, geo.height, geo.width], &batch.window_pixels)?;
    let e = encode(g, &sets[0], geo, x)?;
    let e = g.reshape(e, &[b, n, d])?;
    let ctx = g.slice(e, 1, 0, n - 1)?;
    let next = g.slice(e, 1, 1, n - 1)?;
    let pred = stg_forward(g, &sets[1], cfg, ctx)?;
    let m = b * (n - 1);
    let tr = Transitions {
        current: g.reshape(ctx, &[m, d])?,
        next: g.reshape(next, &[m, d])?,
        predicted: g.reshape(pred, &[m, d])?,
    };
    let p = batch.pairs.len();
    let x = g.input_f64(&[2 * p, geo.frame_stack, geo.height, geo.width], &batch.pair_pixels)?;
    let ep = encode(g, &sets[0], geo, x)?;
    Ok((tr, g.slice(ep, 0, 0, p)?, g.slice(ep, 0, p, p)?))
}

fn model_sets(cfg: &ModelConfig, seed: u64) -> Result<Vec<ParameterSet>> {
    let mut rng = Rng::seed_from_u64(seed);
    Ok(vec![
        init_encoder(cfg, &mut rng, DType::F64)?,
        init_transformer(cfg, &mut rng, DType::F64)?,
        init_critic(cfg, &mut rng, DType::F64)?,
        init_tdr(cfg, &mut rng, DType::F64)?,
    ])
}

fn tiny_data() -> Result<ExpertDataset> {
    Ok(generate_expert_dataset(&tiny_env(), 4)?.0)
}

/// Gradient checks of the critic loss, the generator loss, the
/// temporal-distance loss, the full weighted generator objective and the
/// PPO surrogate, all at 64-bit.
pub fn loss_gradient_checks(gc: GradCheckConfig) -> Result<Vec<LossCheck>> {
    let ds = tiny_data()?;
    let cfg = tiny_model(ds.geometry());
    let mut rng = Rng::seed_from_u64(11);
    let batch = PretrainBatch::sample(&ds, 2, 3, 3, &mut rng)?;
    let targets = batch.targets();
    let weights = PretrainConfig::default();
    let mut out = Vec::new();

    let mut sets = model_sets(&cfg, 5)?;
    let report = gradient_check::<f64, _>(&mut sets, gc, |g, s| {
        let (tr, _, _) = embed(g, s, &cfg, &batch)?;
        loss_dis(g, &s[2], tr)
    })?;
    out.push(LossCheck { loss: "L_dis", report });

    let report = gradient_check::<f64, _>(&mut sets, gc, |g, s| {
        let (tr, _, _) = embed(g, s, &cfg, &batch)?;
        let (adv, mse) = loss_gen(g, &s[2], tr)?;
        g.weighted_sum(&[(weights.alpha, mse), (weights.beta, adv)])
    })?;
    out.push(LossCheck { loss: "L_gen", report });

    let report = gradient_check::<f64, _>(&mut sets, gc, |g, s| {
        let (_, ei, ej) = embed(g, s, &cfg, &batch)?;
        loss_tdr(g, &s[3], &cfg, ei, ej, &targets)
    })?;
    out.push(LossCheck { loss: "L_tdr", report });

    let report = gradient_check::<f64, _>(&mut sets, gc, |g, s| {
        let (tr, ei, ej) = embed(g, s, &cfg, &batch)?;
        let (adv, mse) = loss_gen(g, &s[2], tr)?;
        let tdr = loss_tdr(g, &s[3], &cfg, ei, ej, &targets)?;
        g.weighted_sum(&[(weights.alpha, mse), (weights.beta, adv), (weights.kappa, tdr)])
    })?;
    out.push(LossCheck {
        loss: "generator_objective",
        report,
    });

    // Critic scores alone, so the check also covers the critic's own weights
    // under a loss that does not cancel to first order.
    let report = gradient_check::<f64, _>(&mut sets, gc, |g, s| {
        let (tr, _, _) = embed(g, s, &cfg, &batch)?;
        let d = critic(g, &s[2], tr.current, tr.next)?;
        Ok(g.mean(d))
    })?;
    out.push(LossCheck { loss: "critic_score", report });

    out.push(ppo_check(gc)?);
    Ok(out)
}

fn ppo_check(gc: GradCheckConfig) -> Result<LossCheck> {
    let geo = crate::env::Geometry {
        height: 8,
        width: 8,
        frame_stack: 2,
    };
    let net = PolicyNet::init(geo, 2, DType::F64)?;
    let ds = tiny_data()?;
    let n = 6;
    let mut px = Vec::new();
    for i in 0..n {
        let t = &ds.trajectories[i % ds.len()];
        t.write_state(i % t.len(), &mut px);
    }
    let actions: Vec<usize> = (0..n).map(|i| i % 5).collect();
    let mut g = Graph::<f64>::new();
    let out = policy_forward(&mut g, &net.params, geo, &px, n)?;
    let lp = g.values_f64(out.log_probs);
    // Old log-probabilities offset so ratios sit inside the clip range on
    // both sides of 1 and away from its kinks.
    let offsets = [0.03, -0.05, 0.07, -0.02, 0.04, -0.06];
    let old: Vec<f64> = (0..n).map(|i| lp[i * 5 + actions[i]] + offsets[i]).collect();
    let adv = [1.0, -0.5, 0.25, 2.0, -1.5, 0.75];
    let ret = [0.5, -0.25, 0.0, 1.0, 0.3, -0.7];
    let cfg = PpoConfig::default();
    let mut sets = vec![net.params];
    let report = gradient_check::<f64, _>(&mut sets, gc, |g, s| {
        let batch = PpoBatch {
            pixels: &px,
            actions: &actions,
            old_log_probs: &old,
            advantages: &adv,
            returns: &ret,
        };
        Ok(ppo_loss(g, &s[0], geo, batch, &cfg)?.total)
    })?;
    Ok(LossCheck {
        loss: "ppo_surrogate",
        report,
    })
}
