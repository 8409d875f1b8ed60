use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Network, ParamKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adaptive-moment optimizer state keyed by parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    /// Parameters without a gradient entry are left alone, moments included.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        for (key, g) in grads.iter() {
            let param = net
                .param_mut(key)
                .ok_or_else(|| Error::InvalidConfig(format!("gradient for unknown parameter {key}")))?;
            if param.len() != g.len() {
                return Err(Error::dims("optimizer step", format!("{key} len {}", param.len()), format!("grad len {}", g.len())));
            }
            let m = self.moments.entry(*key).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g[i];
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m.first[i] / correct1;
                let v_hat = m.second[i] / correct2;
                param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            if param.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{key} after optimizer step {}", self.step)));
            }
        }
        Ok(())
    }
}
