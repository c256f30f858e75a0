//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    /// Momentum settings of the recurrent language-model regimen.
    pub fn ulmfit() -> Self {
        Self {
            beta2: 0.99,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update of `theta` in place, at `cfg.lr`.
pub fn adamw_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &OptimizerConfig) -> Result<()> {
    if grad.len() != theta.len() {
        return Err(Error::LengthMismatch {
            left: grad.len(),
            right: theta.len(),
        });
    }
    if state.m.is_empty() && state.t == 0 {
        *state = AdamState::new(theta.len());
    }
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::LengthMismatch {
            left: state.m.len(),
            right: theta.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient[{i}] = {}", grad[i])));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w = *w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * *w;
    }
    Ok(())
}

/// AdamW over a whole [`ParamStore`], one state per tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            states: store.iter().map(|(_, _, m)| AdamState::new(m.len())).collect(),
        })
    }

    /// Updates every parameter with `lrs[id]` set and a gradient present.
    /// Parameters with no learning rate are left bitwise untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lrs: &[Option<f64>]) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| grads.get(id).is_some_and(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{}`", store.name(id))));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (Some(lr), Some(g)) = (lrs[id.index()], grads.get(id)) else {
                continue;
            };
            let cfg = OptimizerConfig { lr, ..self.cfg };
            adamw_step(
                store.get_mut(id).as_mut_slice(),
                g.as_slice(),
                &mut self.states[id.index()],
                &cfg,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut theta = vec![0.5, -2.0];
        let mut s = AdamState::default();
        adamw_step(&mut theta, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(theta, vec![0.5, -2.0]);
    }

    #[test]
    fn one_step_hand_arithmetic() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut theta = vec![1.0];
        let mut s = AdamState::default();
        adamw_step(&mut theta, &[1.0], &mut s, &cfg).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((theta[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decoupled_decay() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..OptimizerConfig::default()
        };
        let mut theta = vec![3.0, -1.5];
        let mut s = AdamState::default();
        adamw_step(&mut theta, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert!((theta[0] - 0.999 * 3.0).abs() < 1e-15);
        assert!((theta[1] - 0.999 * -1.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_before_mutation() {
        let mut theta = vec![1.0, 2.0];
        let mut s = AdamState::default();
        let err = adamw_step(&mut theta, &[0.1, f64::NAN], &mut s, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(theta, vec![1.0, 2.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig::ulmfit().validate().is_ok());
    }
}
