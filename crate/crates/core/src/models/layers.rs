use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{DType, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::Rng;

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data, DType::F64).expect("finite init")
}

pub(crate) fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data, DType::F64).expect("finite init")
}

pub(crate) fn filled(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n], DType::F64).expect("finite")
}

/// Adds `{prefix}.w: [fan_in, fan_out]` and `{prefix}.b: [fan_out]`.
pub(crate) fn add_linear(set: &mut ParameterSet, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    set.insert(format!("{prefix}.w"), fan_in_uniform(rng, &[fan_in, fan_out], fan_in))?;
    set.insert(format!("{prefix}.b"), fan_in_uniform(rng, &[fan_out], fan_in))?;
    Ok(())
}

pub(crate) fn add_layer_norm(set: &mut ParameterSet, prefix: &str, d: usize) -> Result<()> {
    set.insert(format!("{prefix}.gamma"), filled(&[d], 1.0))?;
    set.insert(format!("{prefix}.beta"), filled(&[d], 0.0))?;
    Ok(())
}

/// `x W + b` for `x: [N, in]`.
pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, set: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(set, &format!("{prefix}.w"))?;
    let b = g.param(set, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

pub(crate) fn layer_norm<T: Scalar>(g: &mut Graph<T>, set: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(set, &format!("{prefix}.gamma"))?;
    let beta = g.param(set, &format!("{prefix}.beta"))?;
    g.layer_norm(x, Some(gamma), Some(beta))
}
