//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-5,
        }
    }
}

struct Moments {
    id: ParamId,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer over a fixed parameter set. Only trainable parameters can be
/// registered, so frozen weights can never enter an update.
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, params: &[ParamId], config: AdamWConfig) -> Result<Self> {
        let mut state = Vec::with_capacity(params.len());
        for &id in params {
            let p = store.get(id);
            if !p.trainable {
                return Err(Error::FrozenParam(p.name.clone()));
            }
            let n = p.value.numel();
            state.push(Moments {
                id,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        }
        Ok(Self {
            config,
            state,
            step: 0,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.iter().map(|s| s.id)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without an entry in `grads` see a zero
    /// gradient (their moments still decay and weight decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !self.state.iter().any(|s| s.id == *id) {
                return Err(Error::Contract(format!(
                    "gradient for `{}` which is not registered with the optimizer",
                    store.get(*id).name
                )));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    store.get(*id).name,
                    store.value(*id).shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for s in &mut self.state {
            let g = grads.iter().find(|(id, _)| *id == s.id).map(|(_, g)| g.data());
            let w = store.value_mut(s.id)?.data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * gi;
                s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = s.m[i] / bias1;
                let v_hat = s.v[i] / bias2;
                w[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}
