use serde::{Deserialize, Serialize};

use crate::env::Geometry;
use crate::error::{Error, Result};
use crate::models::{critic, stg_forward, tdr_predict, ModelBundle};
use crate::numerics::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `D(e, e') - D(e, T(e))`.
    Stg,
    /// Running-normalized `D(e, e')` clamped to `[-1, 1]`.
    GuideOnly,
    /// `Stg` plus `nu` times the one-step regressed temporal distance.
    WithProgression,
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stg" => Ok(RewardKind::Stg),
            "guide_only" => Ok(RewardKind::GuideOnly),
            "with_progression" => Ok(RewardKind::WithProgression),
            other => Err(Error::Config(format!(
                "unknown reward mode `{other}` (expected stg|guide_only|with_progression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardMode {
    pub kind: RewardKind,
    /// Intrinsic scale.
    pub eta: f64,
    /// Progression scale; only read by `WithProgression`.
    pub nu: f64,
}

impl RewardMode {
    pub fn stg(eta: f64) -> Self {
        Self {
            kind: RewardKind::Stg,
            eta,
            nu: 0.0,
        }
    }

    pub fn guide_only(eta: f64) -> Self {
        Self {
            kind: RewardKind::GuideOnly,
            eta,
            nu: 0.0,
        }
    }

    pub fn with_progression(eta: f64, nu: f64) -> Self {
        Self {
            kind: RewardKind::WithProgression,
            eta,
            nu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("nu must be non-negative, got {}", self.nu)));
        }
        Ok(())
    }
}

pub const NORMALIZER_VAR_FLOOR: f64 = 1e-8;

/// Welford running mean/variance of a scalar stream with clamped output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub count: u64,
    pub mean: f64,
    m2: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for RunningNormalizer {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

impl RunningNormalizer {
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Standardise with the current statistics and clamp.
    pub fn normalize(&self, x: f64) -> f64 {
        let std = self.variance().max(NORMALIZER_VAR_FLOOR).sqrt();
        ((x - self.mean) / std).clamp(self.lo, self.hi)
    }

    /// Fold `x` into the statistics, then normalise it.
    pub fn observe(&mut self, x: f64) -> f64 {
        self.update(x);
        self.normalize(x)
    }
}

/// Raw per-transition quantities from the frozen bundle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionScores {
    /// `D(e, e')`.
    pub guide: Vec<f64>,
    /// `D(e, T(e))`.
    pub base: Vec<f64>,
    /// `P(e, e')`.
    pub progression: Vec<f64>,
}

impl TransitionScores {
    pub fn intrinsic(&self) -> Vec<f64> {
        self.guide.iter().zip(&self.base).map(|(g, b)| g - b).collect()
    }
}

/// Score `n` transitions given as normalized pixels of the current and next
/// states (each `[n, k, H, W]`). Nothing in the bundle is modified.
pub fn score_transitions(bundle: &ModelBundle, current: &[f64], next: &[f64], n: usize, progression: bool) -> Result<TransitionScores> {
    if n == 0 {
        return Ok(TransitionScores::default());
    }
    let mut g = Graph::<f32>::new();
    for s in bundle.sets() {
        g.freeze(s);
    }
    let mut pixels = Vec::with_capacity(current.len() + next.len());
    pixels.extend_from_slice(current);
    pixels.extend_from_slice(next);
    let e_all = bundle.encode_pixels(&mut g, &pixels, 2 * n)?;
    let e = g.slice(e_all, 0, 0, n)?;
    let e_next = g.slice(e_all, 0, n, n)?;
    let d = bundle.config.d;
    let ctx = g.reshape(e, &[n, 1, d])?;
    let pred = stg_forward(&mut g, &bundle.stg, &bundle.config, ctx)?;
    let pred = g.reshape(pred, &[n, d])?;
    let guide = critic(&mut g, &bundle.critic, e, e_next)?;
    let base = critic(&mut g, &bundle.critic, e, pred)?;
    let progression = if progression {
        let p = tdr_predict(&mut g, &bundle.tdr, &bundle.config, e, e_next)?;
        g.values_f64(p)
    } else {
        Vec::new()
    };
    if let Some(op) = g.non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    Ok(TransitionScores {
        guide: g.values_f64(guide),
        base: g.values_f64(base),
        progression,
    })
}

/// Turns raw transition scores into the rewards fed to the learner.
#[derive(Debug, Clone)]
pub struct RewardModel<'a> {
    bundle: &'a ModelBundle,
    pub mode: RewardMode,
    pub normalizer: RunningNormalizer,
}

impl<'a> RewardModel<'a> {
    pub fn new(bundle: &'a ModelBundle, mode: RewardMode, geometry: Geometry) -> Result<Self> {
        mode.validate()?;
        if bundle.config.geometry != geometry {
            return Err(Error::GeometryMismatch(format!(
                "bundle was trained on {} frames, environment renders {}",
                bundle.config.geometry, geometry
            )));
        }
        Ok(Self {
            bundle,
            mode,
            normalizer: RunningNormalizer::default(),
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    /// Rewards for a batch of transitions, in order.
    pub fn rewards(&mut self, current: &[f64], next: &[f64], n: usize) -> Result<Vec<f64>> {
        let m = self.mode;
        let progression = m.kind == RewardKind::WithProgression && m.nu != 0.0;
        let s = score_transitions(self.bundle, current, next, n, progression)?;
        Ok(match m.kind {
            RewardKind::Stg => s.intrinsic().into_iter().map(|r| m.eta * r).collect(),
            RewardKind::GuideOnly => s.guide.iter().map(|&x| m.eta * self.normalizer.observe(x)).collect(),
            RewardKind::WithProgression => {
                let base = s.intrinsic();
                if progression {
                    base.iter()
                        .zip(&s.progression)
                        .map(|(r, p)| m.eta * r + m.nu * p)
                        .collect()
                } else {
                    base.iter().map(|r| m.eta * r).collect()
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::numerics::DType;

    #[test]
    fn normalizer_conventions() {
        let mut n = RunningNormalizer::default();
        assert_eq!(n.observe(3.7), 0.0);
        for _ in 0..10 {
            assert_eq!(n.observe(3.7), 0.0);
        }
        let mut n = RunningNormalizer::default();
        for i in 0..1000 {
            n.observe((i % 2) as f64);
        }
        let std = n.variance().sqrt();
        assert_eq!(n.observe(n.mean + 5.0 * std), 1.0);
        assert_eq!(n.normalize(n.mean - 5.0 * std), -1.0);
    }

    fn pixels(n: usize, v: f64) -> Vec<f64> {
        (0..n * 4 * 32 * 32).map(|i| if i % 97 == 0 { v } else { 0.0 }).collect()
    }

    #[test]
    fn zero_decoder_makes_identical_transitions_score_zero() {
        // T(e) = e exactly, so for s' = s both critic inputs coincide.
        let mut b = ModelBundle::init(ModelConfig::default(), 0, DType::F32).unwrap();
        b.stg.zero_values(&["stg.decoder.w", "stg.decoder.b"]);
        let s = pixels(3, 1.0);
        let scores = score_transitions(&b, &s, &s, 3, false).unwrap();
        assert_eq!(scores.intrinsic(), vec![0.0; 3]);
    }

    #[test]
    fn eta_scales_and_progression_degenerates() {
        let b = ModelBundle::init(ModelConfig::default(), 1, DType::F32).unwrap();
        let geo = b.config.geometry;
        let (s, s2) = (pixels(4, 1.0), pixels(4, 0.5));
        let r1 = RewardModel::new(&b, RewardMode::stg(1.0), geo).unwrap().rewards(&s, &s2, 4).unwrap();
        let r2 = RewardModel::new(&b, RewardMode::stg(2.0), geo).unwrap().rewards(&s, &s2, 4).unwrap();
        for (a, c) in r1.iter().zip(&r2) {
            assert_eq!(2.0 * a, *c);
        }
        let r0 = RewardModel::new(&b, RewardMode::with_progression(1.0, 0.0), geo)
            .unwrap()
            .rewards(&s, &s2, 4)
            .unwrap();
        assert_eq!(r0, r1);
    }

    #[test]
    fn stg_mode_ignores_normalizer_and_geometry_is_checked() {
        let b = ModelBundle::init(ModelConfig::default(), 1, DType::F32).unwrap();
        let geo = b.config.geometry;
        let mut m = RewardModel::new(&b, RewardMode::stg(1.0), geo).unwrap();
        m.rewards(&pixels(2, 1.0), &pixels(2, 0.2), 2).unwrap();
        assert_eq!(m.normalizer.count, 0);
        let other = Geometry { frame_stack: 2, ..geo };
        assert!(matches!(
            RewardModel::new(&b, RewardMode::stg(1.0), other),
            Err(Error::GeometryMismatch(_))
        ));
        assert!(RewardMode::stg(0.0).validate().is_err());
    }
}
