use super::layers::{add_layer_norm, add_linear, layer_norm, linear};
use super::transformer::{add_attention, attention};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, Graph, ParameterSet, Scalar, Var};
use crate::Rng;

pub const TDR_HIDDEN: usize = 64;

pub fn init_tdr(cfg: &ModelConfig, rng: &mut Rng, dtype: DType) -> Result<ParameterSet> {
    let d = cfg.d;
    let mut set = ParameterSet::new(dtype);
    add_attention(&mut set, rng, "tdr.attn", d)?;
    add_layer_norm(&mut set, "tdr.ln", d)?;
    add_linear(&mut set, rng, "tdr.fc1", 2 * d, TDR_HIDDEN)?;
    add_linear(&mut set, rng, "tdr.fc2", TDR_HIDDEN, 1)?;
    Ok(set)
}

/// Predicted symlog distance from `e_i` to `e_j` (each `[N, d]`), as `[N]`.
///
/// The pair is a 2-token sequence with one bidirectional attention layer;
/// the two output tokens are concatenated in order before the MLP head.
pub fn tdr_predict<T: Scalar>(g: &mut Graph<T>, set: &ParameterSet, cfg: &ModelConfig, ei: Var, ej: Var) -> Result<Var> {
    if g.shape(ei) != g.shape(ej) || g.shape(ei).len() != 2 || g.shape(ei)[1] != cfg.d {
        return Err(Error::Shape {
            op: "tdr_predict",
            lhs: g.shape(ei).to_vec(),
            rhs: g.shape(ej).to_vec(),
        });
    }
    let (n, d) = (g.shape(ei)[0], cfg.d);
    let x = g.concat(&[ei, ej], 1)?;
    let x = g.reshape(x, &[n, 2, d])?;
    let (a, _) = attention(g, set, "tdr.attn", x, cfg.heads, false)?;
    let h = g.add(x, a)?;
    let h = layer_norm(g, set, "tdr.ln", h)?;
    let h = g.reshape(h, &[n, 2 * d])?;
    let h = linear(g, set, "tdr.fc1", h)?;
    let h = g.relu(h);
    let y = linear(g, set, "tdr.fc2", h)?;
    g.reshape(y, &[n])
}
