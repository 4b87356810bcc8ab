use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Halve (by `decay_factor`) the learning rate every this many steps.
    pub decay_every: Option<u64>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_every: None, decay_factor: 0.5 }
    }
}

impl AdamConfig {
    /// The vocoder schedule: lr 1e-3 halved every 100k steps.
    pub fn vocoder() -> Self {
        Self { decay_every: Some(100_000), ..Self::default() }
    }
}

/// Adam moments and step counter for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect::<Vec<_>>();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    /// Learning rate in effect for the next update.
    pub fn current_lr(&self) -> f64 {
        match self.config.decay_every {
            Some(period) if period > 0 => self.config.lr * self.config.decay_factor.powi((self.step / period) as i32),
            _ => self.config.lr,
        }
    }

    /// One bias-corrected Adam update. Every parameter must carry a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.num_params() != store.len() || self.first.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, store has {}, gradients cover {}",
                self.first.len(),
                store.len(),
                grads.num_params()
            )));
        }
        for id in store.ids() {
            if grads.param(id).is_none() {
                return Err(Error::State(format!("missing gradient for {}", store.name(id))));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(lr), T::of(c.eps));
        for id in store.ids() {
            let g = grads.param(id).expect("checked above");
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
