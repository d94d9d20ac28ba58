use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::env::ExpertDataset;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numerics::Graph;
use crate::Rng;

/// States encoded per forward pass.
const EMBED_CHUNK: usize = 256;

pub const MIN_RANDOM_PAIRS: usize = 1000;

/// Embeddings of every state, grouped by trajectory.
pub fn embed_dataset(ds: &ExpertDataset, bundle: &ModelBundle) -> Result<Vec<Vec<Vec<f64>>>> {
    let geo = ds.geometry();
    if geo != bundle.config.geometry {
        return Err(Error::GeometryMismatch(format!(
            "dataset frames are {geo}, bundle expects {}",
            bundle.config.geometry
        )));
    }
    let index: Vec<(usize, usize)> = ds
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| (0..tr.len()).map(move |i| (t, i)))
        .collect();
    let d = bundle.config.d;
    let mut out: Vec<Vec<Vec<f64>>> = ds.trajectories.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for chunk in index.chunks(EMBED_CHUNK) {
        let mut px = Vec::new();
        for &(t, i) in chunk {
            ds.trajectories[t].write_state(i, &mut px);
        }
        let mut g = Graph::<f32>::new();
        for s in bundle.sets() {
            g.freeze(s);
        }
        let e = bundle.encode_pixels(&mut g, &px, chunk.len())?;
        for (&(t, _), row) in chunk.iter().zip(g.values_f64(e).chunks(d)) {
            out[t].push(row.to_vec());
        }
    }
    Ok(out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub mean_adjacent: f64,
    pub mean_random: f64,
    /// `mean_adjacent / mean_random`; `NaN` when degenerate.
    pub ratio: f64,
    /// All random pairs coincide, so the ratio is undefined.
    pub degenerate: bool,
    pub random_pairs: usize,
    /// Mean adjacent distance of each trajectory.
    pub per_trajectory: Vec<f64>,
}

/// Adjacent-state versus random-state embedding distances.
pub fn continuity_from_embeddings(emb: &[Vec<Vec<f64>>], random_pairs: usize, seed: u64) -> Result<ContinuityReport> {
    let random_pairs = random_pairs.max(MIN_RANDOM_PAIRS);
    let flat: Vec<&[f64]> = emb.iter().flatten().map(Vec::as_slice).collect();
    if flat.len() < 2 || emb.iter().all(|t| t.len() < 2) {
        return Err(Error::NoData("continuity needs a trajectory with at least two states".into()));
    }
    let mut per_trajectory = Vec::with_capacity(emb.len());
    let (mut adj_sum, mut adj_n) = (0.0, 0usize);
    for t in emb {
        let ds: Vec<f64> = t.windows(2).map(|w| dist(&w[0], &w[1])).collect();
        adj_sum += ds.iter().sum::<f64>();
        adj_n += ds.len();
        per_trajectory.push(if ds.is_empty() { f64::NAN } else { ds.iter().sum::<f64>() / ds.len() as f64 });
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut rand_sum = 0.0;
    for _ in 0..random_pairs {
        let a = rng.gen_range(0..flat.len());
        let mut b = rng.gen_range(0..flat.len() - 1);
        if b >= a {
            b += 1;
        }
        rand_sum += dist(flat[a], flat[b]);
    }
    let mean_adjacent = adj_sum / adj_n as f64;
    let mean_random = rand_sum / random_pairs as f64;
    let degenerate = !(mean_random > 0.0);
    Ok(ContinuityReport {
        mean_adjacent,
        mean_random,
        ratio: if degenerate { f64::NAN } else { mean_adjacent / mean_random },
        degenerate,
        random_pairs,
        per_trajectory,
    })
}

pub fn embedding_continuity(ds: &ExpertDataset, bundle: &ModelBundle, random_pairs: usize, seed: u64) -> Result<ContinuityReport> {
    continuity_from_embeddings(&embed_dataset(ds, bundle)?, random_pairs, seed)
}
