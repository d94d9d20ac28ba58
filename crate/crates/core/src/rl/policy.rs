use rand::Rng as _;

use crate::env::{scripted_expert_action, Action, Geometry, GridState, ObservationState};
use crate::error::{Error, Result};
use crate::models::layers::{add_linear, fan_in_uniform, linear};
use crate::numerics::{Checkpoint, DType, Graph, ParameterSet, Scalar, Var};
use crate::Rng;

pub const POLICY_CHANNELS: usize = 16;
pub const POLICY_KERNEL: usize = 4;
pub const POLICY_HIDDEN: usize = 64;
/// Output-layer init is shrunk by this factor so the initial policy is
/// close to uniform.
const HEAD_INIT_SCALE: f64 = 0.01;

/// Actor-critic network with its own convolutional trunk.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub geometry: Geometry,
    pub params: ParameterSet,
}

/// Outputs for a batch: log-probabilities `[N, A]` and values `[N]`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyOutput {
    pub log_probs: Var,
    pub values: Var,
}

impl PolicyNet {
    pub fn init(geometry: Geometry, seed: u64, dtype: DType) -> Result<Self> {
        if geometry.height % POLICY_KERNEL != 0 || geometry.width % POLICY_KERNEL != 0 {
            return Err(Error::Config(format!(
                "policy trunk needs frame sides divisible by {POLICY_KERNEL}, got {geometry}"
            )));
        }
        let mut rng: Rng = rand::SeedableRng::seed_from_u64(seed);
        let mut set = ParameterSet::new(dtype);
        let k = geometry.frame_stack;
        let fan = k * POLICY_KERNEL * POLICY_KERNEL;
        set.insert(
            "pi.conv.w",
            fan_in_uniform(&mut rng, &[POLICY_CHANNELS, k, POLICY_KERNEL, POLICY_KERNEL], fan),
        )?;
        set.insert("pi.conv.b", fan_in_uniform(&mut rng, &[POLICY_CHANNELS], fan))?;
        add_linear(&mut set, &mut rng, "pi.fc", Self::flat(geometry), POLICY_HIDDEN)?;
        for (n, shape) in [("pi.policy.w", vec![POLICY_HIDDEN, Action::COUNT]), ("pi.policy.b", vec![Action::COUNT])] {
            let mut t = fan_in_uniform(&mut rng, &shape, POLICY_HIDDEN);
            t.data_mut().iter_mut().for_each(|v| *v *= HEAD_INIT_SCALE);
            set.insert(n, t)?;
        }
        add_linear(&mut set, &mut rng, "pi.value", POLICY_HIDDEN, 1)?;
        Ok(Self { geometry, params: set })
    }

    fn flat(g: Geometry) -> usize {
        POLICY_CHANNELS * (g.height / POLICY_KERNEL) * (g.width / POLICY_KERNEL)
    }

    /// `pixels` holds `n` normalized states, `[n, k, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, pixels: &[f64], n: usize) -> Result<PolicyOutput> {
        policy_forward(g, &self.params, self.geometry, pixels, n)
    }

    /// Action probabilities and value estimates for a batch, no gradients.
    pub fn evaluate(&self, pixels: &[f64], n: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut g = Graph::<f32>::new();
        g.freeze(&self.params);
        let out = self.forward(&mut g, pixels, n)?;
        let lp = g.values_f64(out.log_probs);
        if lp.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "policy".into() });
        }
        let probs = lp.chunks(Action::COUNT).map(|r| r.iter().map(|v| v.exp()).collect()).collect();
        Ok((probs, g.values_f64(out.values)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = serde_json::json!({ "kind": "stg-policy", "geometry": self.geometry });
        Checkpoint::from_sets(manifest.to_string(), [&self.params])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: serde_json::Value = serde_json::from_str(&ck.manifest)?;
        if m.get("kind").and_then(|k| k.as_str()) != Some("stg-policy") {
            return Err(Error::Corrupt("checkpoint does not hold a policy".into()));
        }
        let geometry: Geometry = serde_json::from_value(m["geometry"].clone())?;
        let params = ck.to_set("pi.", DType::F32)?;
        let reference = Self::init(geometry, 0, DType::F32)?;
        if params.names() != reference.params.names() {
            return Err(Error::Corrupt("policy parameters do not match the expected layout".into()));
        }
        for (name, t) in reference.params.iter() {
            if params.get(name).expect("same names").shape() != t.shape() {
                return Err(Error::GeometryMismatch(format!("policy parameter `{name}` has the wrong shape")));
            }
        }
        Ok(Self { geometry, params })
    }
}

/// Policy forward pass on an explicit parameter set laid out like
/// [`PolicyNet::init`].
pub fn policy_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParameterSet,
    geo: Geometry,
    pixels: &[f64],
    n: usize,
) -> Result<PolicyOutput> {
    let x = g.input_f64(&[n, geo.frame_stack, geo.height, geo.width], pixels)?;
    let w = g.param(params, "pi.conv.w")?;
    let b = g.param(params, "pi.conv.b")?;
    let h = g.conv2d(x, w, Some(b), POLICY_KERNEL, 0)?;
    let h = g.relu(h);
    let h = g.reshape(h, &[n, PolicyNet::flat(geo)])?;
    let h = linear(g, params, "pi.fc", h)?;
    let h = g.relu(h);
    let logits = linear(g, params, "pi.policy", h)?;
    let log_probs = g.log_softmax(logits)?;
    let v = linear(g, params, "pi.value", h)?;
    let values = g.reshape(v, &[n])?;
    Ok(PolicyOutput { log_probs, values })
}

/// Sample an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Anything that can pick actions during evaluation.
pub trait Policy {
    fn act(&mut self, layout: &GridState, obs: &ObservationState) -> Result<Action>;
}

/// Greedy action of a trained network.
pub struct GreedyPolicy<'a>(pub &'a PolicyNet);

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, _: &GridState, obs: &ObservationState) -> Result<Action> {
        let mut px = Vec::new();
        obs.write_normalized(&mut px);
        let (probs, _) = self.0.evaluate(&px, 1)?;
        Ok(Action::from_index(argmax(&probs[0])).expect("head has COUNT outputs"))
    }
}

/// Uniform over all actions.
pub struct RandomPolicy(pub Rng);

impl Policy for RandomPolicy {
    fn act(&mut self, _: &GridState, _: &ObservationState) -> Result<Action> {
        Ok(Action::from_index(self.0.gen_range(0..Action::COUNT)).expect("in range"))
    }
}

/// The scripted expert, reading the true layout.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&mut self, layout: &GridState, _: &ObservationState) -> Result<Action> {
        Ok(scripted_expert_action(layout))
    }
}
