//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Moments of one parameter, created on its first update.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Keyed by parameter name; frozen parameters never get an entry.
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<f32>, unfrozen: Group, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id, unfrozen)).collect();
        for &id in &ids {
            let p = store.get(id);
            if p.grad.iter().any(|g| !g.is_finite()) {
                let step = self.state.get(&p.name).map_or(0, |s| s.step) + 1;
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    step,
                });
            }
        }
        let c = self.config;
        for id in ids {
            let p = store.get_mut(id);
            let n = p.grad.len();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powf(st.step as f64);
            let bc2 = 1.0 - c.beta2.powf(st.step as f64);
            let values = p.value.data_mut();
            for i in 0..n {
                let g = f64::from(p.grad[i]);
                let m = c.beta1 * f64::from(st.m[i]) + (1.0 - c.beta1) * g;
                let v = c.beta2 * f64::from(st.v[i]) + (1.0 - c.beta2) * g * g;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let theta = f64::from(values[i]);
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps) + c.weight_decay * theta;
                values[i] = (theta - lr * update) as f32;
            }
        }
        Ok(())
    }
}
