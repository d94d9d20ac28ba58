//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub perturbation: f64,
    /// Entries whose gradient is below `rel_floor * max|grad|` of their set are
    /// compared against that floor instead of their own magnitude.
    pub rel_floor: f64,
    /// Check at most this many (evenly spaced) elements per parameter.
    pub max_elements_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            perturbation: 1e-6,
            rel_floor: 1e-3,
            max_elements_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Offender>,
    /// Every checked entry, in parameter order.
    pub entries: Vec<Offender>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compare gradients of `loss_fn` w.r.t. every element of `sets` against
/// central differences. `loss_fn` must build its loss on the given graph from
/// the given sets only.
pub fn gradient_check<T, F>(sets: &mut [ParameterSet], cfg: GradCheckConfig, mut loss_fn: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[ParameterSet]) -> Result<Var>,
{
    if cfg.perturbation <= 0.0 {
        return Err(Error::invalid("gradient_check", "perturbation must be positive"));
    }
    fn eval<T: Scalar, F>(loss_fn: &mut F, sets: &[ParameterSet]) -> Result<f64>
    where
        F: FnMut(&mut Graph<T>, &[ParameterSet]) -> Result<Var>,
    {
        let mut g = Graph::<T>::new();
        let l = loss_fn(&mut g, sets)?;
        Ok(g.scalar(l))
    }

    let first = eval(&mut loss_fn, sets)?;
    let second = eval(&mut loss_fn, sets)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    for s in sets.iter_mut() {
        s.zero_grad();
    }
    {
        let mut g = Graph::<T>::new();
        let l = loss_fn(&mut g, sets)?;
        let grads = g.backward(l)?;
        for s in sets.iter_mut() {
            s.accumulate(&g, &grads);
        }
    }
    let analytic: Vec<Vec<Vec<f64>>> = sets
        .iter()
        .map(|s| {
            s.names()
                .iter()
                .map(|n| s.grad(n).expect("present").data().to_vec())
                .collect()
        })
        .collect();

    let h = cfg.perturbation;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        entries: Vec::new(),
    };
    for si in 0..sets.len() {
        let scale = analytic[si]
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (cfg.rel_floor * scale).max(1e-12);
        let names = sets[si].names().to_vec();
        for (pi, name) in names.iter().enumerate() {
            let n = sets[si].get(name).expect("present").numel();
            let stride = match cfg.max_elements_per_param {
                Some(k) if k > 0 && n > k => n.div_ceil(k),
                _ => 1,
            };
            for idx in (0..n).step_by(stride) {
                let orig = sets[si].get(name).expect("present").data()[idx];
                sets[si].get_mut(name).expect("present").data_mut()[idx] = orig + h;
                let plus = eval(&mut loss_fn, sets)?;
                sets[si].get_mut(name).expect("present").data_mut()[idx] = orig - h;
                let minus = eval(&mut loss_fn, sets)?;
                sets[si].get_mut(name).expect("present").data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[si][pi][idx];
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = if a == numeric { 0.0 } else { (a - numeric).abs() / denom };
                report.checked += 1;
                let entry = Offender {
                    parameter: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                };
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.worst = Some(entry.clone());
                }
                report.entries.push(entry);
            }
        }
    }
    for s in sets.iter_mut() {
        s.zero_grad();
    }
    Ok(report)
}
