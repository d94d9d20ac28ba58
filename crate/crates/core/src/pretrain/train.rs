use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::config::PretrainConfig;
use super::losses::{embed_pairs, embed_windows, loss_dis, loss_gen, loss_tdr, PretrainBatch};
use crate::env::ExpertDataset;
use crate::error::{Error, ErrorClass, Result};
use crate::models::{clip_critic_weights, spectral_normalize, ModelBundle};
use crate::numerics::{DType, Graph, OptimizerConfig, OptimizerState};
use crate::Rng;

/// Losses of one epoch. `gap` is the mean expert score minus the mean
/// predicted score, measured before the critic update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_mse")]
    pub l_mse: f64,
    #[serde(rename = "L_tdr")]
    pub l_tdr: f64,
    pub gap: f64,
    /// `alpha L_mse + beta L_adv + kappa L_tdr`; not written to CSV.
    #[serde(skip)]
    pub l_gen: f64,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        [self.l_dis, self.l_adv, self.l_mse, self.l_tdr, self.gap, self.l_gen]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub bundle: ModelBundle,
    pub series: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Concatenate datasets that share a frame geometry.
pub fn merge_datasets(datasets: Vec<ExpertDataset>) -> Result<ExpertDataset> {
    let mut it = datasets.into_iter();
    let mut merged = it.next().ok_or_else(|| Error::NoData("no datasets given".into()))?;
    for ds in it {
        if ds.geometry() != merged.geometry() {
            return Err(Error::GeometryMismatch(format!(
                "dataset {} has {} but dataset {} has {}",
                ds.meta.env_fingerprint,
                ds.geometry(),
                merged.meta.env_fingerprint,
                merged.geometry()
            )));
        }
        merged.meta.lengths.extend(&ds.meta.lengths);
        merged.meta.trajectory_count += ds.meta.trajectory_count;
        merged.trajectories.extend(ds.trajectories);
    }
    Ok(merged)
}

fn fingerprints(datasets: &[ExpertDataset]) -> Vec<String> {
    let mut f: Vec<String> = datasets.iter().map(|d| d.meta.env_fingerprint.clone()).collect();
    f.dedup();
    f
}

/// Offline optimisation state: one critic optimizer and one generator
/// optimizer per generator-side network.
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub bundle: ModelBundle,
    pub dataset: ExpertDataset,
    rng: Rng,
    critic_opt: OptimizerState,
    enc_opt: OptimizerState,
    stg_opt: OptimizerState,
    tdr_opt: OptimizerState,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, datasets: Vec<ExpertDataset>) -> Result<Self> {
        config.validate()?;
        let fps = fingerprints(&datasets);
        let dataset = merge_datasets(datasets)?;
        let mut root = Rng::seed_from_u64(config.seed);
        let init_seed: u64 = root.gen();
        let sample_seed: u64 = root.gen();
        let mut bundle = ModelBundle::init(config.model_config(dataset.geometry()), init_seed, DType::F32)?;
        bundle.env_fingerprints = fps;
        let adamw = OptimizerConfig {
            weight_decay: config.weight_decay,
            ..OptimizerConfig::adamw(config.generator_lr)
        };
        Ok(Self {
            critic_opt: OptimizerState::new(OptimizerConfig::rmsprop(config.critic_lr), &bundle.critic),
            enc_opt: OptimizerState::new(adamw, &bundle.encoder),
            stg_opt: OptimizerState::new(adamw, &bundle.stg),
            tdr_opt: OptimizerState::new(adamw, &bundle.tdr),
            rng: Rng::seed_from_u64(sample_seed),
            config,
            bundle,
            dataset,
        })
    }

    pub fn sample_batch(&mut self) -> Result<PretrainBatch> {
        let c = &self.config;
        PretrainBatch::sample(&self.dataset, c.batch_size, c.seq_len, c.tdr_batch, &mut self.rng)
    }

    /// One RMSprop step on `L_dis` followed by clipping. Encoder and
    /// transformer enter as constants. Returns `(L_dis, gap)`.
    pub fn critic_step(&mut self, batch: &PretrainBatch) -> Result<(f64, f64)> {
        let b = &mut self.bundle;
        let mut g = Graph::<f32>::new();
        g.freeze(&b.encoder);
        g.freeze(&b.stg);
        g.freeze(&b.tdr);
        let tr = embed_windows(&mut g, b, batch)?;
        let l = loss_dis(&mut g, &b.critic, tr)?;
        let value = g.scalar(l);
        let grads = g.backward(l)?;
        b.critic.zero_grad();
        b.critic.accumulate(&g, &grads);
        self.critic_opt.step(&mut b.critic)?;
        if b.config.spectral_norm {
            spectral_normalize(&mut b.critic, 5);
        }
        clip_critic_weights(&mut b.critic, self.config.clip_lo, self.config.clip_hi);
        Ok((value, -value))
    }

    /// One AdamW step on `alpha L_mse + beta L_adv + kappa L_tdr` for encoder,
    /// transformer and regressor; the critic is frozen. Returns
    /// `(L_adv, L_mse, L_tdr, total)`.
    pub fn generator_step(&mut self, batch: &PretrainBatch) -> Result<(f64, f64, f64, f64)> {
        let c = &self.config;
        let b = &mut self.bundle;
        let mut g = Graph::<f32>::new();
        g.freeze(&b.critic);
        let tr = embed_windows(&mut g, b, batch)?;
        let (adv, mse) = loss_gen(&mut g, &b.critic, tr)?;
        let (ei, ej) = embed_pairs(&mut g, b, batch)?;
        let tdr = loss_tdr(&mut g, &b.tdr, &b.config, ei, ej, &batch.targets())?;
        let total = g.weighted_sum(&[(c.alpha, mse), (c.beta, adv), (c.kappa, tdr)])?;
        let out = (g.scalar(adv), g.scalar(mse), g.scalar(tdr), g.scalar(total));
        if c.alpha == 0.0 && c.beta == 0.0 && c.kappa == 0.0 {
            return Ok(out);
        }
        let grads = g.backward(total)?;
        for set in [&mut b.encoder, &mut b.stg, &mut b.tdr] {
            set.zero_grad();
            set.accumulate(&g, &grads);
        }
        self.enc_opt.step(&mut b.encoder)?;
        self.stg_opt.step(&mut b.stg)?;
        self.tdr_opt.step(&mut b.tdr)?;
        Ok(out)
    }

    /// Refill the buffer, update the critic, then the generator side.
    pub fn epoch(&mut self) -> Result<LossReport> {
        let batch = self.sample_batch()?;
        let mut dis = (0.0, 0.0);
        for _ in 0..self.config.critic_steps {
            dis = self.critic_step(&batch)?;
        }
        let (l_adv, l_mse, l_tdr, l_gen) = self.generator_step(&batch)?;
        self.bundle.epoch += 1;
        Ok(LossReport {
            step: self.bundle.epoch,
            l_dis: dis.0,
            l_adv,
            l_mse,
            l_tdr,
            gap: dis.1,
            l_gen,
        })
    }

    /// Run every configured epoch. With `out_dir`, periodic checkpoints land
    /// in `out_dir/checkpoints`, the final bundle in `out_dir/bundle.stgc` and
    /// the loss series in `out_dir/losses.csv`.
    pub fn run(mut self, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
        let mut series = Vec::with_capacity(self.config.epochs);
        let mut checkpoints = Vec::new();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        }
        for _ in 0..self.config.epochs {
            let report = match self.epoch() {
                Ok(r) if r.is_finite() => r,
                Ok(r) => return Err(self.abort(r.step, "non-finite loss".into(), &series, &checkpoints, out_dir)),
                Err(e) if e.class() == ErrorClass::Numerical => {
                    let step = self.bundle.epoch + 1;
                    return Err(self.abort(step, e.to_string(), &series, &checkpoints, out_dir));
                }
                Err(e) => return Err(e),
            };
            series.push(report);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.bundle.epoch % every == 0 {
                    let p = dir.join("checkpoints").join(format!("epoch_{:05}.stgc", self.bundle.epoch));
                    self.bundle.save(&p)?;
                    checkpoints.push(p);
                }
            }
        }
        if let Some(dir) = out_dir {
            let p = dir.join("bundle.stgc");
            self.bundle.save(&p)?;
            checkpoints.push(p);
            write_loss_csv(&dir.join("losses.csv"), &series)?;
        }
        Ok(PretrainOutcome {
            bundle: self.bundle,
            series,
            checkpoints,
        })
    }

    fn abort(
        &self,
        step: usize,
        reason: String,
        series: &[LossReport],
        checkpoints: &[PathBuf],
        out_dir: Option<&Path>,
    ) -> Error {
        if let Some(dir) = out_dir {
            // Best effort: keep the series up to the failure for diagnosis.
            let _ = write_loss_csv(&dir.join("losses.csv"), series);
        }
        Error::TrainingAborted {
            step,
            reason,
            checkpoint: checkpoints.last().cloned(),
        }
    }
}

pub fn pretrain(config: PretrainConfig, datasets: Vec<ExpertDataset>, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    Pretrainer::new(config, datasets)?.run(out_dir)
}

pub fn write_loss_csv(path: &Path, series: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in series {
        w.serialize(r).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            line: r.step as u64,
            msg: e.to_string(),
        })?;
    }
    if series.is_empty() {
        w.write_record(["step", "L_dis", "L_adv", "L_mse", "L_tdr", "gap"])
            .map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                line: 0,
                msg: e.to_string(),
            })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    crate::numerics::write_atomic(path, &bytes)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_expert_dataset, EnvConfig};

    fn data() -> ExpertDataset {
        generate_expert_dataset(&EnvConfig::default(), 8).unwrap().0
    }

    fn small(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: 4,
            tdr_batch: 8,
            d: 16,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn steps_are_isolated_and_clip_holds() {
        let mut p = Pretrainer::new(small(1), vec![data()]).unwrap();
        let batch = p.sample_batch().unwrap();
        let before: Vec<String> = [&p.bundle.encoder, &p.bundle.stg, &p.bundle.tdr]
            .iter()
            .map(|s| s.fingerprint())
            .collect();
        let critic_before = p.bundle.critic.fingerprint();
        p.critic_step(&batch).unwrap();
        let mid: Vec<String> = [&p.bundle.encoder, &p.bundle.stg, &p.bundle.tdr]
            .iter()
            .map(|s| s.fingerprint())
            .collect();
        assert_eq!(before, mid);
        assert_ne!(critic_before, p.bundle.critic.fingerprint());
        assert!(p.bundle.critic.max_abs() <= 0.01);

        let critic_mid = p.bundle.critic.fingerprint();
        p.generator_step(&batch).unwrap();
        assert_eq!(critic_mid, p.bundle.critic.fingerprint());
        assert_ne!(mid[0], p.bundle.encoder.fingerprint());
    }

    #[test]
    fn zero_weights_freeze_generator_side() {
        let cfg = PretrainConfig {
            alpha: 0.0,
            beta: 0.0,
            kappa: 0.0,
            ..small(3)
        };
        let p = Pretrainer::new(cfg, vec![data()]).unwrap();
        let (enc, critic) = (p.bundle.encoder.clone(), p.bundle.critic.clone());
        let out = p.run(None).unwrap();
        assert_eq!(out.bundle.encoder, enc);
        assert_ne!(out.bundle.critic, critic);
    }

    #[test]
    fn combined_loss_matches_components() {
        let mut p = Pretrainer::new(small(1), vec![data()]).unwrap();
        let batch = p.sample_batch().unwrap();
        let (adv, mse, tdr, total) = p.generator_step(&batch).unwrap();
        let want = 0.5 * mse + 0.3 * adv + 0.1 * tdr;
        assert!((total - want).abs() <= 1e-6 * want.abs().max(1.0), "{total} vs {want}");
    }

    #[test]
    fn runs_are_deterministic_and_checkpointed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig {
            checkpoint_every: 2,
            ..small(4)
        };
        let a = pretrain(cfg.clone(), vec![data()], Some(d1.path())).unwrap();
        let b = pretrain(cfg, vec![data()], Some(d2.path())).unwrap();
        assert_eq!(a.checkpoints.len(), 3);
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let csv_a = std::fs::read(d1.path().join("losses.csv")).unwrap();
        assert_eq!(csv_a, std::fs::read(d2.path().join("losses.csv")).unwrap());
        let back = read_loss_csv(&d1.path().join("losses.csv")).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[3].l_dis, a.series[3].l_dis);
        assert!(String::from_utf8(csv_a).unwrap().starts_with("step,L_dis,L_adv,L_mse,L_tdr,gap\n"));
    }

    #[test]
    fn geometry_mismatch_across_datasets() {
        let other = generate_expert_dataset(
            &EnvConfig {
                frame_stack: 2,
                ..EnvConfig::default()
            },
            2,
        )
        .unwrap()
        .0;
        let cfg = PretrainConfig {
            datasets: vec!["a".into(), "b".into()],
            ..small(1)
        };
        assert!(matches!(
            Pretrainer::new(cfg, vec![data(), other]),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn multitask_doubles_layers() {
        let corridor = generate_expert_dataset(
            &EnvConfig {
                task: crate::env::Task::Corridor,
                ..EnvConfig::default()
            },
            4,
        )
        .unwrap()
        .0;
        let cfg = PretrainConfig {
            datasets: vec!["a".into(), "b".into()],
            ..small(1)
        };
        let p = Pretrainer::new(cfg, vec![data(), corridor]).unwrap();
        assert_eq!(p.bundle.config.layers, 4);
        assert_eq!(p.bundle.env_fingerprints.len(), 2);
        assert_eq!(p.dataset.len(), 12);
    }
}
