use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::continuity::embed_dataset;
use crate::env::ExpertDataset;
use crate::error::{Error, Result};
use crate::models::{critic, stg_forward, ModelBundle};
use crate::numerics::Graph;
use crate::Rng;

/// Shuffled partners lie more than this many steps away.
pub const SHUFFLE_MIN_GAP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `D(e_t, e_{t+1})` over every adjacent dataset pair.
    pub expert: Vec<f64>,
    /// `D(e_t, T(e_t))` for the same `t`.
    pub predicted: Vec<f64>,
    /// `D(e_t, e_k)` for far-apart or cross-trajectory `k`.
    pub shuffled: Vec<f64>,
    /// `bins + 1` shared edges spanning every score.
    pub edges: Vec<f64>,
    pub expert_counts: Vec<usize>,
    pub predicted_counts: Vec<usize>,
    pub shuffled_counts: Vec<usize>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl ScoreHistogram {
    pub fn expert_mean(&self) -> f64 {
        mean(&self.expert)
    }

    pub fn predicted_mean(&self) -> f64 {
        mean(&self.predicted)
    }

    pub fn shuffled_mean(&self) -> f64 {
        mean(&self.shuffled)
    }

    /// Standard deviation of all three groups pooled together.
    pub fn pooled_std(&self) -> f64 {
        let all: Vec<f64> = [&self.expert, &self.predicted, &self.shuffled]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        let m = mean(&all);
        (all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt()
    }
}

/// Equal-width bins over `[lo, hi]`; the top edge is inclusive.
pub fn bin_counts(xs: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for &x in xs {
        let b = if hi > lo {
            (((x - lo) / (hi - lo)) * bins as f64).floor() as isize
        } else {
            0
        };
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

pub fn build_histogram(expert: Vec<f64>, predicted: Vec<f64>, shuffled: Vec<f64>, bins: usize) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram", "bins must be positive"));
    }
    if expert.is_empty() || predicted.is_empty() || shuffled.is_empty() {
        return Err(Error::NoData("every score group needs at least one sample".into()));
    }
    let all = expert.iter().chain(&predicted).chain(&shuffled);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect::<Vec<_>>();
    Ok(ScoreHistogram {
        expert_counts: bin_counts(&expert, &edges),
        predicted_counts: bin_counts(&predicted, &edges),
        shuffled_counts: bin_counts(&shuffled, &edges),
        edges,
        expert,
        predicted,
        shuffled,
    })
}

/// A partner for `(traj, t)`: a state of the same trajectory more than
/// `SHUFFLE_MIN_GAP` steps away when one exists, otherwise any state of
/// another trajectory.
fn shuffled_partner(lens: &[usize], traj: usize, t: usize, rng: &mut Rng) -> Option<(usize, usize)> {
    let far: Vec<usize> = (0..lens[traj]).filter(|&k| k.abs_diff(t) > SHUFFLE_MIN_GAP).collect();
    if !far.is_empty() {
        return Some((traj, far[rng.gen_range(0..far.len())]));
    }
    if lens.len() < 2 {
        return None;
    }
    let mut other = rng.gen_range(0..lens.len() - 1);
    if other >= traj {
        other += 1;
    }
    Some((other, rng.gen_range(0..lens[other])))
}

/// Critic scores of expert, predicted and shuffled transitions.
pub fn critic_histogram(ds: &ExpertDataset, bundle: &ModelBundle, shuffles: usize, bins: usize, seed: u64) -> Result<ScoreHistogram> {
    let emb = embed_dataset(ds, bundle)?;
    let lens: Vec<usize> = emb.iter().map(Vec::len).collect();
    let d = bundle.config.d;
    let mut cur = Vec::new();
    let mut next = Vec::new();
    let mut starts = Vec::new();
    for (ti, t) in emb.iter().enumerate() {
        for i in 0..t.len().saturating_sub(1) {
            cur.extend_from_slice(&t[i]);
            next.extend_from_slice(&t[i + 1]);
            starts.push((ti, i));
        }
    }
    if starts.is_empty() {
        return Err(Error::NoData("dataset has no transitions".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let (mut sc, mut sk) = (Vec::new(), Vec::new());
    for _ in 0..shuffles {
        let (ti, i) = starts[rng.gen_range(0..starts.len())];
        if let Some((tk, k)) = shuffled_partner(&lens, ti, i, &mut rng) {
            sc.extend_from_slice(&emb[ti][i]);
            sk.extend_from_slice(&emb[tk][k]);
        }
    }
    let m = starts.len();
    let mut g = Graph::<f32>::new();
    for s in bundle.sets() {
        g.freeze(s);
    }
    let e = g.input_f64(&[m, d], &cur)?;
    let e_next = g.input_f64(&[m, d], &next)?;
    let ctx = g.reshape(e, &[m, 1, d])?;
    let pred = stg_forward(&mut g, &bundle.stg, &bundle.config, ctx)?;
    let pred = g.reshape(pred, &[m, d])?;
    let expert = critic(&mut g, &bundle.critic, e, e_next)?;
    let predicted = critic(&mut g, &bundle.critic, e, pred)?;
    let shuffled = if sc.is_empty() {
        Vec::new()
    } else {
        let n = sc.len() / d;
        let a = g.input_f64(&[n, d], &sc)?;
        let b = g.input_f64(&[n, d], &sk)?;
        let s = critic(&mut g, &bundle.critic, a, b)?;
        g.values_f64(s)
    };
    build_histogram(g.values_f64(expert), g.values_f64(predicted), shuffled, bins)
}
