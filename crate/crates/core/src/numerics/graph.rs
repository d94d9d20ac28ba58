//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the tape in reverse and only visits nodes that lie on a path from a
//! gradient-requiring leaf to the loss.

use std::collections::{HashMap, HashSet};

use super::params::ParameterSet;
use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Mse(Var, Var),
    L2NormLast(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherLast { .. } => "gather_last",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Mse(..) => "mse",
            Op::L2NormLast(..) => "l2_norm",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter bindings of one graph: (set id, parameter index) -> leaf.
type Bindings = HashMap<(u64, usize), Var>;

/// A tape of primitive operations in precision `T`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    frozen: HashSet<u64>,
    bindings: Bindings,
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: HashSet::new(),
            bindings: HashMap::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Treat every parameter of `set` as a constant in this graph.
    pub fn freeze(&mut self, set: &ParameterSet) {
        self.frozen.insert(set.id());
    }

    pub(crate) fn bindings(&self) -> impl Iterator<Item = (u64, usize, Var)> + '_ {
        self.bindings.iter().map(|(&(s, i), &v)| (s, i, v))
    }

    /// Name of the first primitive whose forward value was not finite.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].f64()
    }

    pub fn values_f64(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.iter().map(|x| x.f64()).collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        if self.non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "input",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn input_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        self.input(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Leaf that requires gradients but is not bound to a parameter set.
    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let v = self.input(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Bind parameter `name` of `set`. Repeated calls return the same leaf.
    pub fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let idx = set
            .index_of(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter `{name}`")))?;
        let key = (set.id(), idx);
        if let Some(&v) = self.bindings.get(&key) {
            return Ok(v);
        }
        let t = set.value_at(idx);
        let trainable = !self.frozen.contains(&set.id());
        let v = self.push(t.to_vec(), t.shape().to_vec(), Op::Leaf, trainable);
        if trainable {
            self.bindings.insert(key, v);
        }
        Ok(v)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    /// Batched matmul over the leading axis: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]^T` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let kb = if transpose_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); bt * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bt {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let (rsb, csb) = if transpose_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            T::gemm(
                m,
                k,
                n,
                ab,
                k as isize,
                1,
                bb,
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![bt, m, n], Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    // ---- element-wise ---------------------------------------------------

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(op_name, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(v, s, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(v, s, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(v, s, Op::Mul(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(v, s, Op::Minimum(a, b), rg))
    }

    fn check_trailing(&self, op: &'static str, x: Var, y: Var) -> Result<usize> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::Shape {
                op,
                lhs: sx.to_vec(),
                rhs: sy.to_vec(),
            });
        }
        Ok(numel(sy))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.check_trailing("add_broadcast", x, y)?;
        let yv = self.value(y);
        let v = self
            .value(x)
            .chunks(inner)
            .flat_map(|c| c.iter().zip(yv).map(|(&a, &b)| a + b))
            .collect();
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x) || self.rg(y));
        Ok(self.push(v, s, Op::AddBroadcast(x, y), rg))
    }

    /// `x * y` where `y`'s shape equals the trailing axes of `x`.
    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.check_trailing("mul_broadcast", x, y)?;
        let yv = self.value(y);
        let v = self
            .value(x)
            .chunks(inner)
            .flat_map(|c| c.iter().zip(yv).map(|(&a, &b)| a * b))
            .collect();
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x) || self.rg(y));
        Ok(self.push(v, s, Op::MulBroadcast(x, y), rg))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).iter().map(|&a| f(a)).collect();
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(v, s, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.map(x, Op::Scale(x, c), |a| a * ct)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.map(x, Op::AddScalar(x), |a| a + ct)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| if a > T::zero() { a } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |a| gelu(a))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |a| a.exp())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.map(x, Op::Clamp { x, lo, hi }, |a| a.max(l).min(h))
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("softmax", x)?;
        let mut v = self.value(x).to_vec();
        for row in v.chunks_mut(d) {
            softmax_row(row);
        }
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(v, s, Op::Softmax(x), rg))
    }

    /// Softmax over the last axis of a `[.., n, n]` score tensor where query
    /// `i` only sees keys `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::Shape {
                op: "causal_softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let n = s[s.len() - 1];
        let mut v = self.value(x).to_vec();
        for mat in v.chunks_mut(n * n) {
            for (i, row) in mat.chunks_mut(n).enumerate() {
                softmax_row(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|r| *r = T::zero());
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, s, Op::CausalSoftmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("log_softmax", x)?;
        let mut v = self.value(x).to_vec();
        for row in v.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&r| (r - m).exp()).fold(T::zero(), |a, b| a + b).ln() + m;
            row.iter_mut().for_each(|r| *r = *r - lse);
        }
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(v, s, Op::LogSoftmax(x), rg))
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        self.shape(x)
            .last()
            .copied()
            .ok_or_else(|| Error::invalid(op, "rank-0 input"))
    }

    /// Layer normalisation over the last axis, optionally followed by an
    /// element-wise affine map. The variance is guarded by an epsilon.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let d = self.last_dim("layer_norm", x)?;
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dt = T::of(d as f64);
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dt;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &b) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (b - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g);
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(gv).for_each(|(o, &g)| *o = *o * g);
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b);
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        let s = self.shape(x).to_vec();
        Ok(self.push(
            out,
            s,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- convolution ----------------------------------------------------

    /// 2-D cross-correlation. `x: [N,C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]`,
    /// with explicit zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = || Error::Shape {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(bad());
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(bad());
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: sw.clone(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(self.value(x), &geom);
        let ckk = c * kh * kw;
        let np = n * oh * ow;
        // [O, CKK] x [CKK, N*OH*OW] -> [O, N*OH*OW]
        let mut tmp = vec![T::zero(); o * np];
        T::gemm(
            o,
            ckk,
            np,
            self.value(w),
            ckk as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut tmp,
            np as isize,
            1,
        );
        let hw = oh * ow;
        let mut out = vec![T::zero(); n * o * hw];
        let bias = b.map(|b| self.value(b).to_vec());
        for oc in 0..o {
            let bv = bias.as_ref().map_or(T::zero(), |bb| bb[oc]);
            for s in 0..n {
                let src = &tmp[oc * np + s * hw..oc * np + (s + 1) * hw];
                let dst = &mut out[(s * o + oc) * hw..(s * o + oc + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, vec![n, o, oh, ow], Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(v, shape.to_vec(), Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: s,
                rhs: axes.to_vec(),
            });
        }
        let (v, out_shape) = permute_data(self.value(x), &s, axes);
        let rg = self.rg(x);
        Ok(self.push(
            v,
            out_shape,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Slice { x, axis, start }, rg))
    }

    /// Embedding lookup: rows of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) || idx.is_empty() {
            return Err(Error::invalid("gather_rows", format!("indices {idx:?} into table {s:?}")));
        }
        let d = s[1];
        let tv = self.value(table);
        let out = idx.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(table);
        Ok(self.push(
            out,
            vec![idx.len(), d],
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = x[i, idx[i]]` for `x: [N, A]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::Shape {
                op: "gather_last",
                lhs: s,
                rhs: vec![idx.len()],
            });
        }
        let a = s[1];
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * a + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            out,
            vec![idx.len()],
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(vec![v], vec![], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.iter().fold(T::zero(), |a, &b| a + b) / T::of(xv.len() as f64);
        let rg = self.rg(x);
        self.push(vec![v], vec![], Op::MeanAll(x), rg)
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("sum_last", x)?;
        let v = self
            .value(x)
            .chunks(d)
            .map(|r| r.iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let s = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        let rg = self.rg(x);
        Ok(self.push(v, s, Op::SumLast(x), rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = T::of(self.value(a).len() as f64);
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![v], vec![], Op::Mse(a, b), rg))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm_last(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("l2_norm", x)?;
        let v = self
            .value(x)
            .chunks(d)
            .map(|r| r.iter().fold(T::zero(), |a, &b| a + b * b).sqrt())
            .collect();
        let s = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        let rg = self.rg(x);
        Ok(self.push(v, s, Op::L2NormLast(x), rg))
    }

    /// `sum_i w_i * x_i` over scalar-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("weighted_sum", "no terms"))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if let Some(op) = self.non_finite {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("backward of {}", node.op.name()),
                });
            }
            self.backprop(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce() -> Vec<T>) {
        if !self.rg(v) {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
            slot => *slot = Some(c),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.acc_with(grads, *a, |ga| {
                    // ga += g[m,n] * b^T[n,k]
                    T::gemm(m, n, k, g, n as isize, 1, self.value(*b), 1, n as isize, T::one(), ga, k as isize, 1);
                });
                self.acc_with(grads, *b, |gb| {
                    // gb += a^T[k,m] * g[m,n]
                    T::gemm(k, m, n, self.value(*a), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                });
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |ga| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // b: [n,k]; ga += g * b
                            T::gemm(m, n, k, gi, n as isize, 1, bb, k as isize, 1, T::one(), out, k as isize, 1);
                        } else {
                            // b: [k,n]; ga += g * b^T
                            T::gemm(m, n, k, gi, n as isize, 1, bb, 1, n as isize, T::one(), out, k as isize, 1);
                        }
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // gb[n,k] += g^T[n,m] * a[m,k]
                            T::gemm(n, m, k, gi, 1, n as isize, ab, k as isize, 1, T::one(), out, k as isize, 1);
                        } else {
                            // gb[k,n] += a^T[k,m] * g[m,n]
                            T::gemm(k, m, n, ab, 1, k as isize, gi, n as isize, 1, T::one(), out, n as isize, 1);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                self.acc(grads, *b, || g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
            Op::AddBroadcast(x, yv) => {
                self.acc(grads, *x, || g.to_vec());
                let inner = numel(self.shape(*yv));
                self.acc_with(grads, *yv, |gy| {
                    for c in g.chunks(inner) {
                        gy.iter_mut().zip(c).for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::MulBroadcast(x, yv) => {
                let inner = numel(self.shape(*yv));
                let (xv, yvv) = (self.value(*x), self.value(*yv));
                self.acc(grads, *x, || {
                    g.chunks(inner)
                        .flat_map(|c| c.iter().zip(yvv).map(|(&a, &b)| a * b))
                        .collect()
                });
                self.acc_with(grads, *yv, |gy| {
                    for (c, xc) in g.chunks(inner).zip(xv.chunks(inner)) {
                        for ((o, &gg), &xx) in gy.iter_mut().zip(c).zip(xc) {
                            *o = *o + gg * xx;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let ct = T::of(*c);
                self.acc(grads, *x, || g.iter().map(|&v| v * ct).collect());
            }
            Op::AddScalar(x) => self.acc(grads, *x, || g.to_vec()),
            Op::Relu(x) => {
                self.acc(grads, *x, || {
                    g.iter()
                        .zip(y)
                        .map(|(&gg, &yy)| if yy > T::zero() { gg } else { T::zero() })
                        .collect()
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, || g.iter().zip(xv).map(|(&gg, &a)| gg * gelu_grad(a)).collect());
            }
            Op::Exp(x) => {
                self.acc(grads, *x, || g.iter().zip(y).map(|(&gg, &yy)| gg * yy).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let xv = self.value(*x);
                self.acc(grads, *x, || {
                    g.iter()
                        .zip(xv)
                        .map(|(&gg, &a)| if a >= l && a <= h { gg } else { T::zero() })
                        .collect()
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gg, (&x, &z))| if x <= z { gg } else { T::zero() })
                        .collect()
                });
                self.acc(grads, *b, || {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gg, (&x, &z))| if x <= z { T::zero() } else { gg })
                        .collect()
                });
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap();
                self.acc(grads, *x, || softmax_backward(y, g, d, None));
            }
            Op::CausalSoftmax(x) => {
                let d = *node.shape.last().unwrap();
                self.acc(grads, *x, || softmax_backward(y, g, d, Some(d)));
            }
            Op::LogSoftmax(x) => {
                let d = *node.shape.last().unwrap();
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); g.len()];
                    for ((o, gr), yr) in out.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s = gr.iter().fold(T::zero(), |a, &b| a + b);
                        for ((oo, &gg), &yy) in o.iter_mut().zip(gr).zip(yr) {
                            *oo = gg - yy.exp() * s;
                        }
                    }
                    out
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let dt = T::of(d as f64);
                if let Some(b) = beta {
                    self.acc_with(grads, *b, |gb| {
                        for c in g.chunks(d) {
                            gb.iter_mut().zip(c).for_each(|(a, &v)| *a = *a + v);
                        }
                    });
                }
                if let Some(gm) = gamma {
                    self.acc_with(grads, *gm, |gg| {
                        for (c, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((a, &v), &h) in gg.iter_mut().zip(c).zip(xh) {
                                *a = *a + v * h;
                            }
                        }
                    });
                }
                let gvals = gamma.map(|gm| self.value(gm));
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); g.len()];
                    for (r, ((o, gr), xh)) in out.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let dxh: Vec<T> = match gvals {
                            Some(gv) => gr.iter().zip(gv).map(|(&a, &b)| a * b).collect(),
                            None => gr.to_vec(),
                        };
                        let m1 = dxh.iter().fold(T::zero(), |a, &b| a + b) / dt;
                        let m2 = dxh.iter().zip(xh).fold(T::zero(), |a, (&b, &h)| a + b * h) / dt;
                        for ((oo, &dv), &h) in o.iter_mut().zip(&dxh).zip(xh) {
                            *oo = rstd[r] * (dv - m1 - h * m2);
                        }
                    }
                    out
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let ConvGeom { n, o, oh, ow, .. } = *geom;
                let hw = oh * ow;
                let np = n * hw;
                let ckk = geom.c * geom.kh * geom.kw;
                // g: [N, O, HW] -> [O, N*HW]
                let mut go = vec![T::zero(); o * np];
                for s in 0..n {
                    for oc in 0..o {
                        go[oc * np + s * hw..oc * np + (s + 1) * hw]
                            .copy_from_slice(&g[(s * o + oc) * hw..(s * o + oc + 1) * hw]);
                    }
                }
                if let Some(b) = b {
                    self.acc_with(grads, *b, |gb| {
                        for oc in 0..o {
                            gb[oc] = gb[oc] + go[oc * np..(oc + 1) * np].iter().fold(T::zero(), |a, &v| a + v);
                        }
                    });
                }
                self.acc_with(grads, *w, |gw| {
                    // gw[O, CKK] += go[O, NP] * cols^T[NP, CKK]
                    T::gemm(o, np, ckk, &go, np as isize, 1, cols, 1, np as isize, T::one(), gw, ckk as isize, 1);
                });
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); ckk * np];
                    // dcols[CKK, NP] = w^T[CKK, O] * go[O, NP]
                    T::gemm(
                        ckk,
                        o,
                        np,
                        self.value(*w),
                        1,
                        ckk as isize,
                        &go,
                        np as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        np as isize,
                        1,
                    );
                    self.acc_with(grads, *x, |gx| col2im_add(&dcols, geom, gx));
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, || g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.acc(grads, *x, || permute_data(g, &node.shape, &inv).0);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    let off = offset;
                    self.acc_with(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a = *a + b);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let full = sx[*axis];
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let d = node.shape[1];
                self.acc_with(grads, *table, |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::GatherLast { x, idx } => {
                let a = self.shape(*x)[1];
                self.acc_with(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * a + i] = gx[r * a + i] + g[r];
                    }
                });
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, || vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::of(n as f64);
                self.acc(grads, *x, || vec![v; n]);
            }
            Op::SumLast(x) => {
                let d = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, || g.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect());
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = T::of(2.0) * g[0] / T::of(av.len() as f64);
                self.acc(grads, *a, || av.iter().zip(bv).map(|(&x, &z)| c * (x - z)).collect());
                self.acc(grads, *b, || av.iter().zip(bv).map(|(&x, &z)| c * (z - x)).collect());
            }
            Op::L2NormLast(x) => {
                let d = *self.shape(*x).last().unwrap();
                let xv = self.value(*x);
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); xv.len()];
                    for (r, (o, xr)) in out.chunks_mut(d).zip(xv.chunks(d)).enumerate() {
                        if y[r] > T::zero() {
                            let s = g[r] / y[r];
                            o.iter_mut().zip(xr).for_each(|(oo, &xx)| *oo = s * xx);
                        }
                    }
                    out
                });
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for r in row.iter_mut() {
        *r = (*r - m).exp();
        s = s + *r;
    }
    row.iter_mut().for_each(|r| *r = *r / s);
}

/// `dx = y * (g - sum(g * y))` per row; with `causal = Some(n)` row `i` of
/// every `n x n` block only spans columns `0..=i`.
fn softmax_backward<T: Scalar>(y: &[T], g: &[T], d: usize, causal: Option<usize>) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for (r, ((o, yr), gr)) in out.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)).enumerate() {
        let len = causal.map_or(d, |n| r % n + 1);
        let dot = yr[..len]
            .iter()
            .zip(&gr[..len])
            .fold(T::zero(), |a, (&yy, &gg)| a + yy * gg);
        for i in 0..len {
            o[i] = yr[i] * (gr[i] - dot);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Unfold `[N,C,H,W]` into columns `[C*kh*kw, N*OH*OW]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ckk = g.c * g.kh * g.kw;
    let hw = g.oh * g.ow;
    let np = g.n * hw;
    let mut cols = vec![T::zero(); ckk * np];
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for s in 0..g.n {
                    let plane = &x[(s * g.c + ch) * g.h * g.w..(s * g.c + ch + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[s * hw + oy * g.ow..s * hw + (oy + 1) * g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let hw = g.oh * g.ow;
    let np = g.n * hw;
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for s in 0..g.n {
                    let base = (s * g.c + ch) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let di = base + iy as usize * g.w + ix as usize;
                                gx[di] = gx[di] + src[s * hw + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_single_element_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[1], vec![3.7]).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y), &[1.0]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[5], vec![2.5; 5]).unwrap();
        let y = g.layer_norm(x, None, None).unwrap();
        assert!(g.value(y).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matmul_shape_contract() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&[2, 3], vec![1.0; 6]).unwrap();
        let b = g.input(&[3, 4], vec![1.0; 12]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert!(g.value(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&[2, 3], vec![1.0; 6]).unwrap();
        let b = g.input(&[4, 4], vec![1.0; 16]).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 4]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let l = g.sum(p);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_at_stationary_point_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = g.input(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = g.mse(p, c).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.get(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(&[2], vec![3.0, 4.0]).unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(p).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_reports_originating_op() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(&[1], vec![1000.0]).unwrap();
        let e = g.exp(p);
        let l = g.sum(e);
        match g.backward(l) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3, 3], vec![0.0; 9]).unwrap();
        let y = g.causal_softmax(x).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        assert!(close(&g.values_f64(y), &expect, 1e-15));
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (p, s) = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(p[1], 4.0); // out[0,0,1] = in[0,1,0]
        let (back, s2) = permute_data(&p, &s, &[1, 2, 0]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (n, c, h, w, o, k) = (2, 2, 5, 5, 3, 3);
        let xs: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let bs = vec![0.5, -1.0, 2.0];
        let mut g = Graph::<f64>::new();
        let x = g.input(&[n, c, h, w], xs.clone()).unwrap();
        let wv = g.input(&[o, c, k, k], ws.clone()).unwrap();
        let b = g.input(&[o], bs.clone()).unwrap();
        let (stride, pad) = (2, 1);
        let y = g.conv2d(x, wv, Some(b), stride, pad).unwrap();
        let (oh, ow) = (3, 3);
        assert_eq!(g.shape(y), &[n, o, oh, ow]);
        let yv = g.value(y);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bs[oc];
                        for ch in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xs[((s * c + ch) * h + iy as usize) * w + ix as usize]
                                        * ws[((oc * c + ch) * k + ky) * k + kx];
                                }
                            }
                        }
                        assert_eq!(yv[((s * o + oc) * oh + oy) * ow + ox], acc);
                    }
                }
            }
        }
    }
}
