use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |store: &ParamStore| {
            store
                .iter()
                .map(|(_, t)| if t.requires_grad() { vec![0.0; t.len()] } else { Vec::new() })
                .collect()
        };
        Self {
            config,
            step_count: 0,
            first_moment: zeros(store),
            second_moment: zeros(store),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First and second moment buffers in store order (empty for buffers).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuilds a saved optimizer; moment lengths must match `store`.
    pub fn from_parts(
        config: AdamConfig,
        step_count: u64,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
        store: &ParamStore,
    ) -> Result<Self> {
        let fresh = Self::new(config, store);
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&fresh.first_moment, &first_moment) || !same(&fresh.second_moment, &second_moment) {
            return Err(Error::Invalid("optimizer state does not match the model".into()));
        }
        Ok(Self {
            config,
            step_count,
            first_moment,
            second_moment,
        })
    }

    /// Applies one update and clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store
            .iter()
            .find(|(_, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(Error::MissingGrad(name.to_string()));
        }
        if store.len() != self.first_moment.len() {
            return Err(Error::Invalid("optimizer built for a different store".into()));
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
