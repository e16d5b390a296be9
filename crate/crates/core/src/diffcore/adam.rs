use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor: 0.5,
            decay_every: 200,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.decay_factor > 0.0
            && self.decay_every > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Step-decayed learning rate: `base_lr * decay_factor^(epoch / decay_every)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, cfg: &AdamConfig) -> f64 {
    base_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// One bias-corrected Adam update using `cfg.lr`; gradients are zeroed after.
///
/// Every gradient is checked before any value changes, so a NaN leaves the
/// store untouched.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in store.params() {
        if !p.grad.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    store.step_count += 1;
    let t = store.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.params_mut() {
        let g = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = p.adam_v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        for ((x, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}
