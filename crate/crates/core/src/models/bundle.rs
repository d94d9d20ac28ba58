use std::path::Path;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{init_critic, init_encoder, init_tdr, init_transformer, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, DType, Graph, ParameterSet, Scalar, Var};
use crate::Rng;

const BUNDLE_KIND: &str = "stg-bundle";

/// Metadata stored in the checkpoint manifest section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub kind: String,
    pub config: ModelConfig,
    /// Environments whose datasets the bundle was trained on.
    pub env_fingerprints: Vec<String>,
    /// Training epochs completed when the checkpoint was written.
    pub epoch: usize,
}

/// Encoder, transformer, critic and regressor parameters. The encoder set is
/// the only one and is shared by all training paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub env_fingerprints: Vec<String>,
    pub epoch: usize,
    pub encoder: ParameterSet,
    pub stg: ParameterSet,
    pub critic: ParameterSet,
    pub tdr: ParameterSet,
}

impl ModelBundle {
    pub fn init(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut root = Rng::seed_from_u64(seed);
        let mut sub = || Rng::seed_from_u64(root.gen());
        Ok(Self {
            config,
            env_fingerprints: Vec::new(),
            epoch: 0,
            encoder: init_encoder(&config, &mut sub(), dtype)?,
            stg: init_transformer(&config, &mut sub(), dtype)?,
            critic: init_critic(&config, &mut sub(), dtype)?,
            tdr: init_tdr(&config, &mut sub(), dtype)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        Self {
            config: self.config,
            env_fingerprints: self.env_fingerprints.clone(),
            epoch: self.epoch,
            encoder: self.encoder.to_dtype(dtype),
            stg: self.stg.to_dtype(dtype),
            critic: self.critic.to_dtype(dtype),
            tdr: self.tdr.to_dtype(dtype),
        }
    }

    pub fn sets(&self) -> [&ParameterSet; 4] {
        [&self.encoder, &self.stg, &self.critic, &self.tdr]
    }

    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            kind: BUNDLE_KIND.into(),
            config: self.config,
            env_fingerprints: self.env_fingerprints.clone(),
            epoch: self.epoch,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = serde_json::to_string(&self.manifest()).expect("manifest serializes");
        Checkpoint::from_sets(manifest, self.sets())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: BundleManifest =
            serde_json::from_str(&ck.manifest).map_err(|e| Error::Corrupt(format!("bundle manifest: {e}")))?;
        if m.kind != BUNDLE_KIND {
            return Err(Error::Corrupt(format!("checkpoint holds `{}`, not a model bundle", m.kind)));
        }
        m.config.validate()?;
        let reference = Self::init(m.config, 0, DType::F32)?;
        let take = |prefix: &str, want: &ParameterSet| -> Result<ParameterSet> {
            let set = ck.to_set(prefix, DType::F32)?;
            if set.names() != want.names() {
                return Err(Error::Corrupt(format!("`{prefix}` parameters do not match the manifest config")));
            }
            for (n, t) in want.iter() {
                if set.get(n).expect("same names").shape() != t.shape() {
                    return Err(Error::GeometryMismatch(format!("parameter `{n}` has the wrong shape")));
                }
            }
            Ok(set)
        };
        let bundle = Self {
            config: m.config,
            env_fingerprints: m.env_fingerprints,
            epoch: m.epoch,
            encoder: take("enc.", &reference.encoder)?,
            stg: take("stg.", &reference.stg)?,
            critic: take("critic.", &reference.critic)?,
            tdr: take("tdr.", &reference.tdr)?,
        };
        let stored: usize = bundle.sets().iter().map(|s| s.len()).sum();
        if stored != ck.tensors.len() {
            return Err(Error::Corrupt("checkpoint has parameters outside the bundle".into()));
        }
        Ok(bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Embed `n` states given as normalized pixels `[n, k, H, W]`.
    pub fn encode_pixels<T: Scalar>(&self, g: &mut Graph<T>, pixels: &[f64], n: usize) -> Result<Var> {
        let geo = self.config.geometry;
        let x = g.input_f64(&[n, geo.frame_stack, geo.height, geo.width], pixels)?;
        super::encode(g, &self.encoder, geo, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let mut b = ModelBundle::init(ModelConfig::default(), 11, DType::F32).unwrap();
        b.env_fingerprints.push("abc".into());
        let bytes = b.to_checkpoint().encode();
        let back = ModelBundle::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_checkpoint().encode(), bytes);
    }

    #[test]
    fn seeds_determine_parameters() {
        let a = ModelBundle::init(ModelConfig::default(), 1, DType::F32).unwrap();
        let b = ModelBundle::init(ModelConfig::default(), 1, DType::F32).unwrap();
        let c = ModelBundle::init(ModelConfig::default(), 2, DType::F32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.encoder, c.encoder);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let b = ModelBundle::init(ModelConfig::default(), 1, DType::F32).unwrap();
        let mut ck = b.to_checkpoint();
        ck.tensors.retain(|(n, _)| n != "tdr.fc2.b");
        assert!(ModelBundle::from_checkpoint(&ck).is_err());
    }
}
