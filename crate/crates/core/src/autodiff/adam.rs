use super::params::{ParamGrad, ParamId, ParamStore};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied every `decay_epochs`.
    pub decay_rate: f64,
    pub decay_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.8,
            decay_epochs: 40,
        }
    }
}

impl AdamConfig {
    /// `lr · decay_rate^⌊epoch / decay_epochs⌋`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let k = epoch / self.decay_epochs.max(1);
        self.lr * self.decay_rate.powi(k as i32)
    }
}

/// Adam moments for the parameters it has seen.
///
/// Bias correction counts the updates each parameter has received, so a
/// parameter that joins late starts with properly corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Calls to [`Adam::step`] so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates applied to one parameter.
    pub fn param_steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.t as u64)
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.state.get(&id).map(|s| s.m.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.state.get(&id).map(|s| s.v.as_slice())
    }

    /// One bias-corrected update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[ParamGrad], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).len() != g.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: {} gradients for {} values", store.name(*id), g.len(), store.get(*id).len()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for (id, g) in grads {
            let p = &mut store.get_mut(*id).data;
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            let (m, v) = (&mut st.m, &mut st.v);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn schedule() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at_epoch(0), 1e-4);
        assert_eq!(c.lr_at_epoch(39), 1e-4);
        assert!((c.lr_at_epoch(40) - 8e-5).abs() < 1e-18);
        assert!((c.lr_at_epoch(80) - 6.4e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let (mut s, id) = one_param(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &[(id, vec![0.0])], 1e-3).unwrap();
        assert_eq!(s.get(id).item(), 0.7);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let (mut s, id) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &[(id, vec![2.0])], 1e-3).unwrap();
        let (m0, v0) = (adam.first_moment(id).unwrap()[0], adam.second_moment(id).unwrap()[0]);
        adam.step(&mut s, &[(id, vec![0.0])], 1e-3).unwrap();
        assert!((adam.first_moment(id).unwrap()[0] - 0.9 * m0).abs() < 1e-15);
        assert!((adam.second_moment(id).unwrap()[0] - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_matches_closed_form() {
        // m̂ = g and v̂ = g² exactly, so every step moves by lr·g/(|g|+ε).
        for g in [3.0, -0.02, 1e-3] {
            let (mut s, id) = one_param(1.0);
            let mut adam = Adam::new(AdamConfig::default());
            let lr = 1e-2;
            for _ in 0..200 {
                adam.step(&mut s, &[(id, vec![g])], lr).unwrap();
            }
            let step = lr * g / (g.abs() + 1e-8);
            let want = 1.0 - 200.0 * step;
            assert!((s.get(id).item() - want).abs() < 1e-9, "g={g}");
            // never more than lr per step
            assert!(step.abs() <= lr);
        }
    }

    #[test]
    fn late_parameter_gets_its_own_bias_correction() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(0.0)).unwrap();
        let b = s.add("b", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            adam.step(&mut s, &[(a, vec![1.0])], 1e-3).unwrap();
        }
        adam.step(&mut s, &[(b, vec![5.0])], 1e-3).unwrap();
        // first corrected step of any parameter moves it by lr·sign(g)
        assert!((s.get(b).item() + 1e-3).abs() < 1e-10);
        assert_eq!((adam.param_steps(a), adam.param_steps(b), adam.steps()), (100, 1, 101));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut s, id) = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut s, &[(id, vec![1.0, 2.0])], 1e-3).is_err());
    }
}
