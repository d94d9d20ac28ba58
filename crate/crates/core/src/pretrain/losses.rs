use crate::env::{sample_pair_indices, sample_window_indices, ExpertDataset, PairIndex, WindowIndex};
use crate::error::{Error, Result};
use crate::models::{critic, stg_forward, tdr_predict, ModelBundle, ModelConfig};
use crate::numerics::{Graph, ParameterSet, Scalar, Var};
use crate::Rng;

/// One epoch buffer: windows of consecutive states plus independent pairs.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub windows: Vec<WindowIndex>,
    pub pairs: Vec<PairIndex>,
    pub seq_len: usize,
    /// Normalized pixels of every window state, `[B * n, k, H, W]`.
    pub window_pixels: Vec<f64>,
    /// Pixels of pair states, all `i` states then all `j` states.
    pub pair_pixels: Vec<f64>,
}

impl PretrainBatch {
    pub fn sample(ds: &ExpertDataset, batch: usize, seq_len: usize, pairs: usize, rng: &mut Rng) -> Result<Self> {
        let windows = (0..batch)
            .map(|_| sample_window_indices(ds, seq_len, rng))
            .collect::<Result<Vec<_>>>()?;
        let pairs = (0..pairs)
            .map(|_| sample_pair_indices(ds, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(ds, windows, pairs, seq_len))
    }

    pub fn assemble(ds: &ExpertDataset, windows: Vec<WindowIndex>, pairs: Vec<PairIndex>, seq_len: usize) -> Self {
        let mut window_pixels = Vec::new();
        for w in &windows {
            let t = &ds.trajectories[w.traj];
            for i in w.start..w.start + w.len {
                t.write_state(i, &mut window_pixels);
            }
        }
        let mut pair_pixels = Vec::new();
        for p in &pairs {
            ds.trajectories[p.traj].write_state(p.i, &mut pair_pixels);
        }
        for p in &pairs {
            ds.trajectories[p.traj].write_state(p.j, &mut pair_pixels);
        }
        Self {
            windows,
            pairs,
            seq_len,
            window_pixels,
            pair_pixels,
        }
    }

    pub fn targets(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.target).collect()
    }
}

/// Embedded transitions of a batch, each `[B * (n - 1), d]`: current
/// embeddings, actual next embeddings, predicted next embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Transitions {
    pub current: Var,
    pub next: Var,
    pub predicted: Var,
}

/// Encode every window and run the transformer on its first `n - 1` states.
pub fn embed_windows<T: Scalar>(g: &mut Graph<T>, bundle: &ModelBundle, batch: &PretrainBatch) -> Result<Transitions> {
    let (b, n, d) = (batch.windows.len(), batch.seq_len, bundle.config.d);
    if b == 0 {
        return Err(Error::invalid("embed_windows", "empty batch"));
    }
    if n < 2 {
        return Err(Error::invalid("embed_windows", "windows shorter than 2"));
    }
    let e = bundle.encode_pixels(g, &batch.window_pixels, b * n)?;
    let e = g.reshape(e, &[b, n, d])?;
    let ctx = g.slice(e, 1, 0, n - 1)?;
    let next = g.slice(e, 1, 1, n - 1)?;
    let pred = stg_forward(g, &bundle.stg, &bundle.config, ctx)?;
    let m = b * (n - 1);
    Ok(Transitions {
        current: g.reshape(ctx, &[m, d])?,
        next: g.reshape(next, &[m, d])?,
        predicted: g.reshape(pred, &[m, d])?,
    })
}

/// `mean D(e, e_pred) - mean D(e, e_next)`.
pub fn loss_dis<T: Scalar>(g: &mut Graph<T>, critic_set: &ParameterSet, tr: Transitions) -> Result<Var> {
    let fake = critic(g, critic_set, tr.current, tr.predicted)?;
    let real = critic(g, critic_set, tr.current, tr.next)?;
    let diff = g.sub(fake, real)?;
    Ok(g.mean(diff))
}

/// `(L_adv, L_mse)`: negated mean critic score of predicted transitions, and
/// mean squared error between predicted and actual next embeddings.
pub fn loss_gen<T: Scalar>(g: &mut Graph<T>, critic_set: &ParameterSet, tr: Transitions) -> Result<(Var, Var)> {
    let fake = critic(g, critic_set, tr.current, tr.predicted)?;
    let m = g.mean(fake);
    let adv = g.scale(m, -1.0);
    let mse = g.mse(tr.predicted, tr.next)?;
    Ok((adv, mse))
}

/// Mean squared error between regressed and true symlog distances.
pub fn loss_tdr<T: Scalar>(
    g: &mut Graph<T>,
    tdr_set: &ParameterSet,
    cfg: &ModelConfig,
    ei: Var,
    ej: Var,
    targets: &[f64],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::invalid("loss_tdr", "no pairs"));
    }
    let pred = tdr_predict(g, tdr_set, cfg, ei, ej)?;
    let t = g.input_f64(&[targets.len()], targets)?;
    g.mse(pred, t)
}

/// Encode both members of every pair; returns `(e_i, e_j)`.
pub fn embed_pairs<T: Scalar>(g: &mut Graph<T>, bundle: &ModelBundle, batch: &PretrainBatch) -> Result<(Var, Var)> {
    let p = batch.pairs.len();
    let e = bundle.encode_pixels(g, &batch.pair_pixels, 2 * p)?;
    Ok((g.slice(e, 0, 0, p)?, g.slice(e, 0, p, p)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DType;

    fn const_critic(c: f64) -> ParameterSet {
        // Zero weights everywhere, final bias c: D(e, e') = c.
        let cfg = ModelConfig::default();
        let mut set = crate::models::init_critic(&cfg, &mut rand::SeedableRng::seed_from_u64(0), DType::F64).unwrap();
        for n in set.names().to_vec() {
            set.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        set.get_mut("critic.fc3.b").unwrap().set(0, c);
        set
    }

    fn transitions(g: &mut Graph<f64>, cur: &[f64], next: &[f64], pred: &[f64]) -> Transitions {
        let m = cur.len() / 64;
        Transitions {
            current: g.input_f64(&[m, 64], cur).unwrap(),
            next: g.input_f64(&[m, 64], next).unwrap(),
            predicted: g.input_f64(&[m, 64], pred).unwrap(),
        }
    }

    #[test]
    fn constant_critic() {
        let set = const_critic(0.007);
        let mut g = Graph::<f64>::new();
        let v: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
        let w: Vec<f64> = v.iter().map(|x| -x).collect();
        let tr = transitions(&mut g, &v, &w, &v);
        let l = loss_dis(&mut g, &set, tr).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let (adv, mse) = loss_gen(&mut g, &set, tr).unwrap();
        assert!((g.scalar(adv) + 0.007).abs() < 1e-15);
        // Predicted equals current here, not next.
        assert!(g.scalar(mse) > 0.0);
        let tr = transitions(&mut g, &v, &w, &w);
        let (_, mse) = loss_gen(&mut g, &set, tr).unwrap();
        assert_eq!(g.scalar(mse), 0.0);
    }

    #[test]
    fn hand_set_scores() {
        // Critic depending only on the second input's first coordinate with
        // slope 1 through one ReLU path: D = relu(x).
        let mut set = const_critic(0.0);
        set.get_mut("critic.fc0.w").unwrap().set(64 * 128, 1.0);
        set.get_mut("critic.fc1.w").unwrap().set(0, 1.0);
        set.get_mut("critic.fc2.w").unwrap().set(0, 1.0);
        set.get_mut("critic.fc3.w").unwrap().set(0, 1.0);
        let mut g = Graph::<f64>::new();
        let mut next = vec![0.0; 64];
        next[0] = 3.0;
        let mut pred = vec![0.0; 64];
        pred[0] = 1.0;
        let tr = transitions(&mut g, &[0.0; 64], &next, &pred);
        let l = loss_dis(&mut g, &set, tr).unwrap();
        assert_eq!(g.scalar(l), -2.0);
    }

    #[test]
    fn tdr_loss_examples() {
        let cfg = ModelConfig::default();
        let mut set = crate::models::init_tdr(&cfg, &mut rand::SeedableRng::seed_from_u64(0), DType::F64).unwrap();
        set.zero_values(&["tdr.fc2.w", "tdr.fc2.b"]);
        let mut g = Graph::<f64>::new();
        let e: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        let ei = g.input_f64(&[2, 64], &e).unwrap();
        let ej = g.input_f64(&[2, 64], &e).unwrap();
        let ln2 = std::f64::consts::LN_2;
        let l = loss_tdr(&mut g, &set, &cfg, ei, ej, &[0.0, ln2]).unwrap();
        assert!((g.scalar(l) - ln2 * ln2 / 2.0).abs() < 1e-15);
        // A predictor that outputs exactly the targets: bias-only head.
        set.get_mut("tdr.fc2.b").unwrap().set(0, 0.25);
        let mut g = Graph::<f64>::new();
        let ei = g.input_f64(&[2, 64], &e).unwrap();
        let ej = g.input_f64(&[2, 64], &e).unwrap();
        let l = loss_tdr(&mut g, &set, &cfg, ei, ej, &[0.25, 0.25]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(loss_tdr(&mut g, &set, &cfg, ei, ej, &[]).is_err());
    }
}
