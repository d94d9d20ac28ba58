use super::layers::{add_linear, linear};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, Graph, ParameterSet, Scalar, Var};
use crate::Rng;

pub const CRITIC_HIDDEN: [usize; 3] = [128, 64, 32];

fn widths(d: usize) -> Vec<usize> {
    let mut w = vec![2 * d];
    w.extend(CRITIC_HIDDEN);
    w.push(1);
    w
}

/// Initialised inside the clip box so the box invariant holds from step 0.
pub fn init_critic(cfg: &ModelConfig, rng: &mut Rng, dtype: DType) -> Result<ParameterSet> {
    let mut set = ParameterSet::new(dtype);
    for (i, w) in widths(cfg.d).windows(2).enumerate() {
        add_linear(&mut set, rng, &format!("critic.fc{i}"), w[0], w[1])?;
    }
    set.clamp_all(-cfg.clip, cfg.clip);
    Ok(set)
}

/// Scores of directed transitions `(e, e_next)`, each `[N, d]`, as `[N]`.
pub fn critic<T: Scalar>(g: &mut Graph<T>, set: &ParameterSet, e: Var, e_next: Var) -> Result<Var> {
    if g.shape(e) != g.shape(e_next) || g.shape(e).len() != 2 {
        return Err(Error::Shape {
            op: "critic",
            lhs: g.shape(e).to_vec(),
            rhs: g.shape(e_next).to_vec(),
        });
    }
    let n = g.shape(e)[0];
    let layers = CRITIC_HIDDEN.len() + 1;
    let mut x = g.concat(&[e, e_next], 1)?;
    for i in 0..layers {
        x = linear(g, set, &format!("critic.fc{i}"), x)?;
        if i + 1 < layers {
            x = g.relu(x);
        }
    }
    g.reshape(x, &[n])
}

/// Clamp every critic parameter into `[lo, hi]`.
pub fn clip_critic_weights(set: &mut ParameterSet, lo: f64, hi: f64) {
    set.clamp_all(lo, hi);
}

/// Upper bound on `|score|` for inputs with `max |x_i| <= input_bound` when
/// every weight and bias lies in `[-clip, clip]`.
pub fn critic_score_bound(d: usize, clip: f64, input_bound: f64) -> f64 {
    widths(d)
        .windows(2)
        .fold(input_bound, |b, w| clip * w[0] as f64 * b + clip)
}

/// Rescale each critic weight matrix to spectral norm at most 1, estimated by
/// power iteration.
pub fn spectral_normalize(set: &mut ParameterSet, iterations: usize) {
    let dt = set.dtype();
    let names: Vec<String> = set.names().iter().filter(|n| n.ends_with(".w")).cloned().collect();
    for name in names {
        let t = set.get_mut(&name).expect("listed");
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let w = t.data_mut();
        let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
        let mut sigma = 0.0;
        for _ in 0..iterations.max(1) {
            let u: Vec<f64> = (0..rows)
                .map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum())
                .collect();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 {
                break;
            }
            let vn: Vec<f64> = (0..cols)
                .map(|c| (0..rows).map(|r| w[r * cols + c] * u[r] / nu).sum())
                .collect();
            sigma = vn.iter().map(|x| x * x).sum::<f64>().sqrt();
            if sigma == 0.0 {
                break;
            }
            v = vn.iter().map(|x| x / sigma).collect();
        }
        if sigma > 1.0 {
            w.iter_mut().for_each(|x| *x = dt.round(*x / sigma));
        }
    }
}
