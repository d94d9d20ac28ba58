use std::fs;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::expert::scripted_expert_action;
use super::grid::{EnvConfig, Geometry, GridEnv, Task};
use super::{Frame, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::write_atomic;
use crate::Rng;

pub const DATASET_MAGIC: [u8; 4] = *b"STGD";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 5 * 4;

/// Observation-only demonstrations sharing one frame geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub env_fingerprint: String,
    pub task: Task,
    pub grid: usize,
    pub scale: usize,
    pub frame_stack: usize,
    pub trajectory_count: usize,
    pub lengths: Vec<usize>,
}

impl DatasetMeta {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.grid * self.scale,
            width: self.grid * self.scale,
            frame_stack: self.frame_stack,
        }
    }
}

impl ExpertDataset {
    pub fn geometry(&self) -> Geometry {
        self.meta.geometry()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Split off the trailing `fraction` of trajectories (at least one each side).
    pub fn split(&self, held_out_fraction: f64) -> Result<(ExpertDataset, ExpertDataset)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Dataset("need at least 2 trajectories to split".into()));
        }
        let held = ((n as f64 * held_out_fraction).round() as usize).clamp(1, n - 1);
        let part = |ts: &[Trajectory]| {
            let mut meta = self.meta.clone();
            meta.trajectory_count = ts.len();
            meta.lengths = ts.iter().map(Trajectory::len).collect();
            ExpertDataset {
                meta,
                trajectories: ts.to_vec(),
            }
        };
        Ok((part(&self.trajectories[..n - held]), part(&self.trajectories[n - held..])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub attempts: usize,
    pub discarded: usize,
    /// Fraction of expert rollouts that reached the goal.
    pub success_rate: f64,
}

/// Roll the scripted expert until `num_trajectories` successful episodes are
/// collected; failed episodes are discarded and counted.
pub fn generate_expert_dataset(config: &EnvConfig, num_trajectories: usize) -> Result<(ExpertDataset, GenerationReport)> {
    if num_trajectories == 0 {
        return Err(Error::Config("num_trajectories must be at least 1".into()));
    }
    let mut env = GridEnv::new(*config)?;
    let mut seeds = Rng::seed_from_u64(config.seed);
    let max_attempts = 100 * num_trajectories + 1000;
    let mut trajectories = Vec::with_capacity(num_trajectories);
    let mut attempts = 0;
    while trajectories.len() < num_trajectories {
        if attempts >= max_attempts {
            return Err(Error::Dataset(format!(
                "expert succeeded only {} times in {attempts} attempts",
                trajectories.len()
            )));
        }
        attempts += 1;
        let first = env.reset(seeds.gen());
        let mut frames = vec![newest(&first)];
        let mut actions = Vec::new();
        let mut success = false;
        while !env.is_done() {
            let a = scripted_expert_action(env.layout());
            let out = env.step(a)?;
            actions.push(a);
            frames.push(newest(&out.state));
            success = out.success;
        }
        if success {
            let t = Trajectory::new(config.frame_stack, frames)?.with_actions(actions);
            trajectories.push(t.observations_only());
        }
    }
    let report = GenerationReport {
        requested: num_trajectories,
        attempts,
        discarded: attempts - num_trajectories,
        success_rate: num_trajectories as f64 / attempts as f64,
    };
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        env_fingerprint: config.fingerprint(),
        task: config.task,
        grid: config.grid,
        scale: config.scale,
        frame_stack: config.frame_stack,
        trajectory_count: trajectories.len(),
        lengths: trajectories.iter().map(Trajectory::len).collect(),
    };
    Ok((ExpertDataset { meta, trajectories }, report))
}

fn newest(s: &super::ObservationState) -> Frame {
    Frame {
        height: s.height(),
        width: s.width(),
        pixels: s.frame(s.frame_stack() - 1).to_vec(),
    }
}

fn traj_file(i: usize) -> String {
    format!("traj_{i:05}.bin")
}

pub(crate) fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let g = t.geometry();
    let mut out = Vec::with_capacity(HEADER_BYTES + t.len() * g.height * g.width);
    out.extend_from_slice(&DATASET_MAGIC);
    for v in [DATASET_FORMAT_VERSION, t.len() as u32, g.height as u32, g.width as u32, g.frame_stack as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in t.frames() {
        out.extend_from_slice(&f.pixels);
    }
    out
}

pub(crate) fn decode_trajectory(bytes: &[u8], expect: Geometry) -> Result<Trajectory> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::TruncatedPayload {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let version = word(0) as u32;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            expected: DATASET_FORMAT_VERSION,
            found: version,
        });
    }
    let (count, h, w, k) = (word(1), word(2), word(3), word(4));
    let found = Geometry {
        height: h,
        width: w,
        frame_stack: k,
    };
    if found != expect {
        return Err(Error::GeometryMismatch(format!("file has {found}, dataset declares {expect}")));
    }
    let expected = HEADER_BYTES + count * h * w;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let frames = bytes[HEADER_BYTES..]
        .chunks_exact(h * w)
        .map(|c| Frame {
            height: h,
            width: w,
            pixels: c.to_vec(),
        })
        .collect();
    Trajectory::new(k, frames)
}

/// Write `meta.json` and one binary file per trajectory into `dir`.
pub fn save_dataset(dataset: &ExpertDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, t) in dataset.trajectories.iter().enumerate() {
        if t.geometry() != dataset.geometry() {
            return Err(Error::GeometryMismatch(format!("trajectory {i} has {}", t.geometry())));
        }
        write_atomic(&dir.join(traj_file(i)), &encode_trajectory(t))?;
    }
    let mut meta = serde_json::to_string_pretty(&dataset.meta)?;
    meta.push('\n');
    write_atomic(&dir.join("meta.json"), meta.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<ExpertDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            expected: DATASET_FORMAT_VERSION,
            found: meta.format_version,
        });
    }
    if meta.lengths.len() != meta.trajectory_count {
        return Err(Error::Corrupt("trajectory count disagrees with length list".into()));
    }
    let geometry = meta.geometry();
    let mut trajectories = Vec::with_capacity(meta.trajectory_count);
    for i in 0..meta.trajectory_count {
        let p = dir.join(traj_file(i));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let t = decode_trajectory(&bytes, geometry)?;
        if t.len() != meta.lengths[i] {
            return Err(Error::Corrupt(format!(
                "{}: {} frames, meta says {}",
                p.display(),
                t.len(),
                meta.lengths[i]
            )));
        }
        trajectories.push(t);
    }
    Ok(ExpertDataset { meta, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> ExpertDataset {
        let cfg = EnvConfig {
            seed,
            ..EnvConfig::default()
        };
        generate_expert_dataset(&cfg, n).unwrap().0
    }

    #[test]
    fn chase_generation_always_succeeds() {
        let (ds, rep) = generate_expert_dataset(&EnvConfig::default(), 50).unwrap();
        assert_eq!(ds.len(), 50);
        assert_eq!(rep.success_rate, 1.0);
        assert_eq!(rep.discarded, 0);
        assert!(ds.trajectories.iter().all(|t| t.actions().is_none() && t.len() >= 2));
    }

    #[test]
    fn single_trajectory() {
        assert_eq!(small(1, 1).len(), 1);
    }

    #[test]
    fn short_horizon_discards_and_reports() {
        let cfg = EnvConfig {
            horizon: 8,
            ..EnvConfig::default()
        };
        let (ds, rep) = generate_expert_dataset(&cfg, 20).unwrap();
        assert_eq!(ds.len(), 20);
        assert!(rep.discarded > 0, "{rep:?}");
        assert!(rep.success_rate < 1.0);
    }

    #[test]
    fn roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = small(7, 5);
        save_dataset(&a, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, a);
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&small(7, 5), dir2.path()).unwrap();
        for i in 0..5 {
            let f = traj_file(i);
            assert_eq!(
                fs::read(dir.path().join(&f)).unwrap(),
                fs::read(dir2.path().join(&f)).unwrap()
            );
        }
        assert_eq!(
            fs::read(dir.path().join("meta.json")).unwrap(),
            fs::read(dir2.path().join("meta.json")).unwrap()
        );
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let t = &small(3, 1).trajectories[0];
        let g = t.geometry();
        let bytes = encode_trajectory(t);

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_trajectory(&bad, g), Err(Error::BadMagic { .. })));

        let cut = &bytes[..bytes.len() - 5];
        match decode_trajectory(cut, g) {
            Err(Error::TruncatedPayload { expected, actual }) => {
                assert_eq!((expected, actual), (bytes.len(), bytes.len() - 5));
            }
            other => panic!("{other:?}"),
        }

        let other = Geometry { frame_stack: 2, ..g };
        assert!(matches!(decode_trajectory(&bytes, other), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn file_format_has_no_action_or_reward_fields() {
        let t = &small(2, 1).trajectories[0];
        let g = t.geometry();
        assert_eq!(encode_trajectory(t).len(), HEADER_BYTES + t.len() * g.height * g.width);
        let meta = serde_json::to_value(&small(2, 1).meta).unwrap();
        let keys: Vec<_> = meta.as_object().unwrap().keys().cloned().collect();
        assert!(keys.iter().all(|k| !k.contains("action") && !k.contains("reward")));
    }
}
