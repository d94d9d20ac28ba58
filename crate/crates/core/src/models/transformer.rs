use super::layers::{add_layer_norm, add_linear, layer_norm, linear, normal};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, Graph, ParameterSet, Scalar, Var};
use crate::Rng;

pub const MLP_RATIO: usize = 4;

pub(crate) fn add_attention(set: &mut ParameterSet, rng: &mut Rng, prefix: &str, d: usize) -> Result<()> {
    for p in ["q", "k", "v", "proj"] {
        add_linear(set, rng, &format!("{prefix}.{p}"), d, d)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention over `x: [B, n, d]`.
///
/// Returns the projected context `[B, n, d]` and the attention weights
/// `[B * heads, n, n]`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParameterSet,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::invalid("attention", format!("input {s:?} with {heads} heads")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let flat = g.reshape(x, &[b * n, d])?;
    let split = |g: &mut Graph<T>, name: &str| -> Result<Var> {
        let y = linear(g, set, &format!("{prefix}.{name}"), flat)?;
        let y = g.reshape(y, &[b, n, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * heads, n, dh])
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = if causal { g.causal_softmax(scores)? } else { g.softmax(scores)? };
    let z = g.batch_matmul(weights, v, false)?;
    let z = g.reshape(z, &[b, heads, n, dh])?;
    let z = g.permute(z, &[0, 2, 1, 3])?;
    let z = g.reshape(z, &[b * n, d])?;
    let out = linear(g, set, &format!("{prefix}.proj"), z)?;
    Ok((g.reshape(out, &[b, n, d])?, weights))
}

pub fn init_transformer(cfg: &ModelConfig, rng: &mut Rng, dtype: DType) -> Result<ParameterSet> {
    let d = cfg.d;
    let mut set = ParameterSet::new(dtype);
    set.insert("stg.pos", normal(rng, &[cfg.block_size, d], 0.02))?;
    for l in 0..cfg.layers {
        let p = format!("stg.block{l}");
        add_attention(&mut set, rng, &format!("{p}.attn"), d)?;
        add_layer_norm(&mut set, &format!("{p}.ln1"), d)?;
        add_linear(&mut set, rng, &format!("{p}.fc1"), d, MLP_RATIO * d)?;
        add_linear(&mut set, rng, &format!("{p}.fc2"), MLP_RATIO * d, d)?;
        add_layer_norm(&mut set, &format!("{p}.ln2"), d)?;
    }
    add_linear(&mut set, rng, "stg.decoder", d, d)?;
    Ok(set)
}

/// Predicted next embeddings for `e: [B, n, d]`; output `i` is
/// `e_i + decoder(h_i)` and depends on inputs `0..=i` only.
pub fn stg_forward<T: Scalar>(g: &mut Graph<T>, stg: &ParameterSet, cfg: &ModelConfig, e: Var) -> Result<Var> {
    let s = g.shape(e).to_vec();
    if s.len() != 3 || s[2] != cfg.d {
        return Err(Error::invalid("stg_forward", format!("expected [B, n, {}], got {s:?}", cfg.d)));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if n == 0 {
        return Err(Error::invalid("stg_forward", "empty sequence"));
    }
    if n > cfg.block_size {
        return Err(Error::invalid(
            "stg_forward",
            format!("sequence length {n} exceeds block size {}", cfg.block_size),
        ));
    }
    let table = g.param(stg, "stg.pos")?;
    let pos = g.slice(table, 0, 0, n)?;
    let mut x = g.add_broadcast(e, pos)?;
    for l in 0..cfg.layers {
        let p = format!("stg.block{l}");
        let (a, _) = attention(g, stg, &format!("{p}.attn"), x, cfg.heads, true)?;
        let h = g.add(x, a)?;
        let h = layer_norm(g, stg, &format!("{p}.ln1"), h)?;
        let flat = g.reshape(h, &[b * n, d])?;
        let m = linear(g, stg, &format!("{p}.fc1"), flat)?;
        let m = g.gelu(m);
        let m = linear(g, stg, &format!("{p}.fc2"), m)?;
        let m = g.reshape(m, &[b, n, d])?;
        let y = g.add(h, m)?;
        x = layer_norm(g, stg, &format!("{p}.ln2"), y)?;
    }
    let flat = g.reshape(x, &[b * n, d])?;
    let delta = linear(g, stg, "stg.decoder", flat)?;
    let delta = g.reshape(delta, &[b, n, d])?;
    g.add(e, delta)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::numerics::Tensor;

    fn setup() -> (ModelConfig, ParameterSet) {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            block_size: 8,
            ..ModelConfig::default()
        };
        let set = init_transformer(&cfg, &mut Rng::seed_from_u64(9), DType::F64).unwrap();
        (cfg, set)
    }

    fn run(cfg: &ModelConfig, set: &ParameterSet, e: &[f64], n: usize) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.input_f64(&[1, n, cfg.d], e).unwrap();
        let y = stg_forward(&mut g, set, cfg, x).unwrap();
        g.values_f64(y)
    }

    fn tokens(n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect()
    }

    #[test]
    fn zero_decoder_gives_identity() {
        let (cfg, mut set) = setup();
        set.zero_values(&["stg.decoder.w", "stg.decoder.b"]);
        let e = tokens(5, cfg.d);
        assert_eq!(run(&cfg, &set, &e, 5), e);
    }

    #[test]
    fn future_perturbation_leaves_past_bitwise_equal() {
        let (cfg, set) = setup();
        let n = 8;
        let base = run(&cfg, &set, &tokens(n, cfg.d), n);
        for j in 0..n {
            let mut e = tokens(n, cfg.d);
            e[j * cfg.d..(j + 1) * cfg.d].iter_mut().for_each(|v| *v += 3.7);
            let out = run(&cfg, &set, &e, n);
            assert_eq!(out[..j * cfg.d], base[..j * cfg.d], "token {j}");
            assert_ne!(out[j * cfg.d..(j + 1) * cfg.d], base[j * cfg.d..(j + 1) * cfg.d]);
        }
    }

    #[test]
    fn over_length_and_empty_rejected() {
        let (cfg, set) = setup();
        let mut g = Graph::<f64>::new();
        let x = g.input_f64(&[1, 9, cfg.d], &tokens(9, cfg.d)).unwrap();
        assert!(stg_forward(&mut g, &set, &cfg, x).is_err());
        let x = g.input(&[1, 0, cfg.d], vec![]).unwrap();
        assert!(stg_forward(&mut g, &set, &cfg, x).is_err());
    }

    fn identity_attention(d: usize) -> ParameterSet {
        let mut set = ParameterSet::new(DType::F64);
        let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        for p in ["q", "k", "v", "proj"] {
            set.insert(format!("a.{p}.w"), Tensor::new(vec![d, d], eye.clone(), DType::F64).unwrap())
                .unwrap();
            set.insert(format!("a.{p}.b"), Tensor::zeros(vec![d], DType::F64)).unwrap();
        }
        set
    }

    #[test]
    fn single_token_attends_to_itself() {
        let set = identity_attention(2);
        let mut g = Graph::<f64>::new();
        let x = g.input_f64(&[1, 1, 2], &[0.3, -0.4]).unwrap();
        let (z, w) = attention(&mut g, &set, "a", x, 1, true).unwrap();
        assert_eq!(g.values_f64(w), vec![1.0]);
        assert_eq!(g.values_f64(z), vec![0.3, -0.4]);
    }

    #[test]
    fn two_tokens_match_hand_softmax() {
        // q = k = v = x with one head, d = 2: z_1 = x_1,
        // z_2 = softmax([x2.x1, x2.x2] / sqrt 2) mixture of x_1, x_2.
        let set = identity_attention(2);
        let (x1, x2) = ([1.0, 0.0], [0.5, 2.0]);
        let mut g = Graph::<f64>::new();
        let x = g.input_f64(&[1, 2, 2], &[x1[0], x1[1], x2[0], x2[1]]).unwrap();
        let (z, _) = attention(&mut g, &set, "a", x, 1, true).unwrap();
        let z = g.values_f64(z);
        let s1 = 0.5 / 2f64.sqrt();
        let s2 = 4.25 / 2f64.sqrt();
        let p1 = s1.exp() / (s1.exp() + s2.exp());
        let want = [p1 * x1[0] + (1.0 - p1) * x2[0], p1 * x1[1] + (1.0 - p1) * x2[1]];
        assert_eq!(&z[..2], &x1);
        assert!((z[2] - want[0]).abs() < 1e-12 && (z[3] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut set = identity_attention(2);
        set.zero_values(&["a.k.w"]);
        let mut g = Graph::<f64>::new();
        let x = g.input_f64(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let (z, w) = attention(&mut g, &set, "a", x, 1, true).unwrap();
        let z = g.values_f64(z);
        assert!((z[4] - 3.0).abs() < 1e-12 && (z[5] - 5.0).abs() < 1e-12);
        for row in g.values_f64(w).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}
