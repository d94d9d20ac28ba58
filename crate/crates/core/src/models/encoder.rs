use super::layers::{add_linear, fan_in_uniform, linear};
use super::ModelConfig;
use crate::env::Geometry;
use crate::error::{Error, Result};
use crate::numerics::{DType, Graph, ParameterSet, Scalar, Var};
use crate::Rng;

pub const ENCODER_CHANNELS: [usize; 3] = [8, 16, 32];

/// Spatial side after the stride-2 convolution stack.
fn out_side(side: usize) -> usize {
    ENCODER_CHANNELS.iter().fold(side, |s, _| (s + 2 - 3) / 2 + 1)
}

pub fn init_encoder(cfg: &ModelConfig, rng: &mut Rng, dtype: DType) -> Result<ParameterSet> {
    let mut set = ParameterSet::new(dtype);
    let mut cin = cfg.geometry.frame_stack;
    for (i, &cout) in ENCODER_CHANNELS.iter().enumerate() {
        let fan_in = cin * 9;
        set.insert(format!("enc.conv{i}.w"), fan_in_uniform(rng, &[cout, cin, 3, 3], fan_in))?;
        set.insert(format!("enc.conv{i}.b"), fan_in_uniform(rng, &[cout], fan_in))?;
        cin = cout;
    }
    let flat = cin * out_side(cfg.geometry.height) * out_side(cfg.geometry.width);
    add_linear(&mut set, rng, "enc.fc", flat, cfg.d)?;
    Ok(set)
}

/// Pixels in `[0, 1]`, laid out `[N, k, H, W]`, to `[N, d]` embeddings.
pub fn encode<T: Scalar>(g: &mut Graph<T>, enc: &ParameterSet, geometry: Geometry, pixels: Var) -> Result<Var> {
    let s = g.shape(pixels).to_vec();
    let want = [geometry.frame_stack, geometry.height, geometry.width];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::GeometryMismatch(format!(
            "encoder expects [N, {}, {}, {}], got {s:?}",
            want[0], want[1], want[2]
        )));
    }
    let mut x = pixels;
    for i in 0..ENCODER_CHANNELS.len() {
        let w = g.param(enc, &format!("enc.conv{i}.w"))?;
        let b = g.param(enc, &format!("enc.conv{i}.b"))?;
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        x = g.relu(y);
    }
    let n = s[0];
    let flat: usize = g.shape(x)[1..].iter().product();
    let x = g.reshape(x, &[n, flat])?;
    linear(g, enc, "enc.fc", x)
}
