use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction; moments and step counts are kept per
/// parameter so subsets of a store can be stepped independently.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    slots: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.slots
            .get(id.index())
            .and_then(|s| s.as_ref())
            .map_or(0, |s| s.t)
    }

    /// Update every parameter in `which` from its gradient.
    pub fn step(&mut self, params: &mut Params, grads: &Grads, which: &[ParamId]) {
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for &id in which {
            let g = grads.get(id).data();
            let p = params.get_mut(id).data_mut();
            let slot = self.slots[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            for i in 0..g.len() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
