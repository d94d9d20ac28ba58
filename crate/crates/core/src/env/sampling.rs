use rand::Rng as _;

use super::dataset::ExpertDataset;
use super::ObservationState;
use crate::error::{Error, Result};
use crate::models::symlog_distance;
use crate::Rng;

/// `len` consecutive states of trajectory `traj` starting at `start` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowIndex {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairIndex {
    pub traj: usize,
    pub i: usize,
    pub j: usize,
    pub target: f64,
}

/// Uniform over trajectories of length `>= n`, then uniform over start indices.
pub fn sample_window_indices(dataset: &ExpertDataset, n: usize, rng: &mut Rng) -> Result<WindowIndex> {
    if n == 0 {
        return Err(Error::invalid("sample_window", "window length must be positive"));
    }
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&t| dataset.trajectories[t].len() >= n)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!("no trajectory has at least {n} states")));
    }
    let traj = eligible[rng.gen_range(0..eligible.len())];
    let start = rng.gen_range(0..=dataset.trajectories[traj].len() - n);
    Ok(WindowIndex { traj, start, len: n })
}

pub fn sample_window(dataset: &ExpertDataset, n: usize, rng: &mut Rng) -> Result<Vec<ObservationState>> {
    let w = sample_window_indices(dataset, n, rng)?;
    let t = &dataset.trajectories[w.traj];
    Ok((w.start..w.start + n).map(|i| t.state(i)).collect())
}

/// Uniform trajectory, then `i` and `j` independently uniform within it.
pub fn sample_pair_indices(dataset: &ExpertDataset, rng: &mut Rng) -> Result<PairIndex> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot sample a pair from an empty dataset".into()));
    }
    let traj = rng.gen_range(0..dataset.len());
    let n = dataset.trajectories[traj].len();
    let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
    Ok(PairIndex {
        traj,
        i,
        j,
        target: symlog_distance(i, j),
    })
}

pub fn sample_pair(dataset: &ExpertDataset, rng: &mut Rng) -> Result<(ObservationState, ObservationState, f64)> {
    let p = sample_pair_indices(dataset, rng)?;
    let t = &dataset.trajectories[p.traj];
    Ok((t.state(p.i), t.state(p.j), p.target))
}
