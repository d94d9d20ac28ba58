use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph};
use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Named parameters with a gradient accumulator of identical shape each.
///
/// Every set carries a process-unique id; a [`Graph`] uses it to route
/// gradients back, so two sets never alias even when cloned.
#[derive(Debug)]
pub struct ParameterSet {
    id: u64,
    dtype: DType,
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            dtype: self.dtype,
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
        }
    }
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParameterSet {
    pub fn new(dtype: DType) -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            dtype,
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("parameter_set", format!("duplicate parameter `{name}`")));
        }
        let value = value.to_dtype(self.dtype);
        self.index.insert(name.clone(), self.names.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec(), self.dtype));
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.grads[i])
    }

    pub(crate) fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub(crate) fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut().zip(self.grads.iter_mut()))
            .map(|(n, (v, g))| (n, v, g))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add the gradients of every parameter of this set bound in `graph`.
    pub fn accumulate<T: Scalar>(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (set, idx, var) in graph.bindings() {
            if set != self.id {
                continue;
            }
            if let Some(g) = grads.get(var) {
                for (acc, &v) in self.grads[idx].data_mut().iter_mut().zip(g) {
                    *acc += v.f64();
                }
            }
        }
    }

    /// Overwrite a gradient directly (used by tests and custom losses).
    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if grad.shape() != self.values[i].shape() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.values[i].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        self.grads[i] = grad.to_dtype(DType::F64);
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> ParameterSet {
        let mut out = ParameterSet::new(dtype);
        for (n, v) in self.iter() {
            out.insert(n, v.clone()).expect("names are unique");
        }
        out
    }

    /// Clamp every element of every parameter into `[lo, hi]`.
    pub fn clamp_all(&mut self, lo: f64, hi: f64) {
        let dt = self.dtype;
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = dt.round(x.clamp(lo, hi)));
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Set every element of the named parameters to zero.
    pub fn zero_values(&mut self, names: &[&str]) {
        for n in names {
            if let Some(t) = self.get_mut(n) {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.iter() {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for &e in v.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers_are_unique() {
        let mut p = ParameterSet::new(DType::F32);
        p.insert("w", Tensor::zeros(vec![2], DType::F32)).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![3], DType::F32)).is_err());
    }

    #[test]
    fn clone_gets_new_identity() {
        let p = ParameterSet::new(DType::F32);
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p, q);
    }

    #[test]
    fn gradients_route_to_bound_set_only() {
        let mut a = ParameterSet::new(DType::F64);
        a.insert("w", Tensor::new(vec![2], vec![1.0, 2.0], DType::F64).unwrap()).unwrap();
        a.insert("unused", Tensor::new(vec![1], vec![5.0], DType::F64).unwrap()).unwrap();
        let mut b = a.clone();
        let mut g = Graph::<f64>::new();
        let w = g.param(&a, "w").unwrap();
        let w2 = g.param(&a, "w").unwrap();
        assert_eq!(w, w2);
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        a.accumulate(&g, &grads);
        b.accumulate(&g, &grads);
        assert_eq!(a.grad("w").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(a.grad("unused").unwrap().data(), &[0.0]);
        assert_eq!(b.grad("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(a.grad("w").unwrap().shape(), a.get("w").unwrap().shape());
    }

    #[test]
    fn frozen_sets_receive_nothing() {
        let mut a = ParameterSet::new(DType::F64);
        a.insert("w", Tensor::new(vec![2], vec![1.0, 2.0], DType::F64).unwrap()).unwrap();
        let mut g = Graph::<f64>::new();
        g.freeze(&a);
        let w = g.param(&a, "w").unwrap();
        assert!(!g.requires_grad(w));
    }
}
