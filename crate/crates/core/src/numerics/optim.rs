use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    RmsProp,
}

/// Hyper-parameters of one optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop smoothing constant.
    pub alpha: f64,
    pub eps: f64,
    /// Decoupled weight decay, AdamW only.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Plain Adam: AdamW without decay.
    pub fn adam(lr: f64) -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::adamw(lr)
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment accumulators for one parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    names: Vec<String>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            names: params.names().to_vec(),
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if let Some(name) = params
            .names()
            .iter()
            .find(|n| !self.names.contains(n))
            .or_else(|| self.names.iter().find(|n| params.index_of(n).is_none()))
        {
            return Err(Error::MissingGradient(name.clone()));
        }
        for (name, _, g) in params.iter_mut_with_grads() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of `{name}`"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let dt = params.dtype();
        for (name, value, grad) in params.iter_mut_with_grads() {
            let i = self.names.iter().position(|n| n == name).expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = value.data_mut();
            match c.kind {
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for (k, (&g, p)) in grad.data().iter().zip(data.iter_mut()).enumerate() {
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        let decayed = *p * (1.0 - c.lr * c.weight_decay);
                        *p = dt.round(decayed - c.lr * mhat / (vhat.sqrt() + c.eps));
                    }
                }
                OptimizerKind::RmsProp => {
                    for (k, (&g, p)) in grad.data().iter().zip(data.iter_mut()).enumerate() {
                        v[k] = c.alpha * v[k] + (1.0 - c.alpha) * g * g;
                        *p = dt.round(*p - c.lr * g / (v[k].sqrt() + c.eps));
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}
