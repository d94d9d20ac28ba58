use crate::env::{Action, ObservationState};
use crate::error::{Error, Result};

/// On-policy transitions. Rewards are intrinsic only; there is no field for
/// task rewards.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    /// Raw `u8` pixels of each state, concatenated.
    pub states: Vec<u8>,
    state_len: usize,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// The episode ended at the goal: no bootstrap.
    pub terminal: Vec<bool>,
    /// The episode ended for any reason, terminal or truncated.
    pub episode_end: Vec<bool>,
    /// `V(s')` used when the next state is not terminal.
    pub next_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }

    /// Append one transition. Rewards, next values and advantages are
    /// filled in later.
    pub fn push(&mut self, state: &ObservationState, action: Action, log_prob: f64, value: f64) -> Result<()> {
        let bytes = state.bytes();
        if self.state_len == 0 {
            self.state_len = bytes.len();
        } else if bytes.len() != self.state_len {
            return Err(Error::GeometryMismatch(format!(
                "state of {} bytes in a buffer of {}-byte states",
                bytes.len(),
                self.state_len
            )));
        }
        self.states.extend_from_slice(bytes);
        self.actions.push(action.index());
        self.log_probs.push(log_prob);
        self.values.push(value);
        Ok(())
    }

    /// Normalized pixels of the selected states.
    pub fn pixels(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.state_len);
        for &i in idx {
            let s = &self.states[i * self.state_len..(i + 1) * self.state_len];
            out.extend(s.iter().map(|&b| b as f64 / 255.0));
        }
        out
    }

    fn check_aligned(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.log_probs.len(),
            self.values.len(),
            self.rewards.len(),
            self.terminal.len(),
            self.episode_end.len(),
            self.next_values.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.states.len() != n * self.state_len {
            return Err(Error::invalid("compute_gae", format!("misaligned buffer: {n} actions, field lengths {lens:?}")));
        }
        Ok(())
    }

    /// Fill `advantages` and `returns` in place.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        self.check_aligned()?;
        let (a, r) = gae(
            &self.rewards,
            &self.values,
            &self.next_values,
            &self.terminal,
            &self.episode_end,
            gamma,
            lambda,
        )?;
        self.advantages = a;
        self.returns = r;
        Ok(())
    }
}

/// Generalized advantage estimation over a flat rollout that may span
/// several episodes. Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if [values.len(), next_values.len(), terminal.len(), episode_end.len()].iter().any(|&l| l != n) {
        return Err(Error::invalid("gae", "input lengths differ"));
    }
    if !(gamma > 0.0 && gamma <= 1.0 && (0.0..=1.0).contains(&lambda)) {
        return Err(Error::invalid("gae", format!("gamma {gamma} / lambda {lambda} out of range")));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let boot = if terminal[t] { 0.0 } else { gamma * next_values[t] };
        let delta = rewards[t] + boot - values[t];
        let carry = if episode_end[t] { 0.0 } else { gamma * lambda * next };
        adv[t] = delta + carry;
        next = adv[t];
    }
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite { op: "gae".into() });
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shift to mean 0 and scale to std 1 (population); constant inputs map to 0.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_transition_base_case() {
        let (a, r) = gae(&[0.5], &[0.2], &[0.7], &[false], &[false], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.5 + 0.99 * 0.7 - 0.2]);
        assert_eq!(r, vec![a[0] + 0.2]);
        let (a, _) = gae(&[0.5], &[0.2], &[0.7], &[true], &[true], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.5 - 0.2]);
    }

    #[test]
    fn three_step_unroll() {
        let (g, l) = (0.99, 0.95);
        let r = [1.0, -0.5, 0.25];
        let v = [0.1, 0.2, 0.3];
        let nv = [0.2, 0.3, 0.4];
        let d: Vec<f64> = (0..3).map(|t| r[t] + g * nv[t] - v[t]).collect();
        let a2 = d[2];
        let a1 = d[1] + g * l * a2;
        let a0 = d[0] + g * l * a1;
        let (a, _) = gae(&r, &v, &nv, &[false; 3], &[false; 3], g, l).unwrap();
        for (x, y) in a.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn episode_boundary_and_truncation_bootstrap() {
        // Step 0 ends a truncated episode: bootstraps from V(s') but carries
        // nothing over from step 1.
        let (a, _) = gae(&[0.0, 1.0], &[0.0, 0.0], &[2.0, 0.0], &[false, true], &[true, true], 0.5, 1.0).unwrap();
        assert_eq!(a, vec![1.0, 1.0]);
    }

    #[test]
    fn zeros_and_errors() {
        let (a, _) = gae(&[0.0; 4], &[0.0; 4], &[0.0; 4], &[false; 4], &[false; 4], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.0; 4]);
        assert!(gae(&[0.0; 2], &[0.0], &[0.0; 2], &[false; 2], &[false; 2], 0.99, 0.95).is_err());
        assert!(gae(&[0.0], &[0.0], &[0.0], &[false], &[false], 0.0, 0.95).is_err());
        let mut b = RolloutBuffer::default();
        b.rewards.push(1.0);
        assert!(b.compute_gae(0.99, 0.95).is_err());
    }

    #[test]
    fn advantage_normalization() {
        let mut a = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut a);
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        let var = a.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-6);
        let mut c = vec![3.0; 5];
        normalize_advantages(&mut c);
        assert_eq!(c, vec![0.0; 5]);
    }
}
