use serde::{Deserialize, Serialize};

use super::param::ParamGroup;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings: {self:?}")))
        }
    }
}

/// One bias-corrected Adam update of `group` from its `grad` buffer.
///
/// The gradient is zeroed afterwards and `step_count` incremented. A
/// non-finite gradient leaves the group untouched.
pub fn adam_step(group: &mut ParamGroup, cfg: &AdamConfig) -> Result<()> {
    if !group.grad.is_finite() {
        return Err(Error::NonFinite(group.name.clone()));
    }
    group.step_count += 1;
    let t = group.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grad = group.grad.data();
    let m = group.adam_m.data_mut();
    for (m, g) in m.iter_mut().zip(grad) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    }
    let v = group.adam_v.data_mut();
    for (v, g) in v.iter_mut().zip(grad) {
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    }
    let values = group.value.data_mut();
    for ((x, m), v) in values
        .iter_mut()
        .zip(group.adam_m.data())
        .zip(group.adam_v.data())
    {
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    group.zero_grad();
    Ok(())
}
