//! Adam with bias correction, operating on named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad Adam settings {self:?}")))
        }
    }
}

/// Optimizer state: step count and first/second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    /// Applies one update to every trainable parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, grad) in grads {
            let entry = store
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if !entry.trainable {
                continue;
            }
            let mut value = entry.value.clone();
            value.check_same_shape(grad)?;
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for (((p, m), v), &g) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            store.set(name, value)?;
        }
        Ok(())
    }
}
