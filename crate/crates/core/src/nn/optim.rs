use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::autodiff::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1, warmup_steps: 50 }
    }
}

/// Adam with decoupled weight decay. Decay applies to rank >= 2 tensors only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) moments: Vec<Option<(ArrayD<T>, ArrayD<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self { config, step: 0, moments: vec![None; n_params] }
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        let warm = self.config.warmup_steps;
        if warm == 0 || step >= warm {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / warm as f64
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<(ParamId, ArrayD<T>)>) {
        let lr = self.learning_rate(self.step);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (id, grad) in grads {
            let param = &mut store.params[id.0];
            if !param.trainable {
                continue;
            }
            if param.value.ndim() >= 2 && c.weight_decay > 0.0 {
                let decay = T::lit(1.0 - lr * c.weight_decay);
                param.value.mapv_inplace(|w| w * decay);
            }
            let slot = &mut self.moments[id.0];
            let (m, v) = slot.get_or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            Zip::from(&mut param.value).and(m).and(v).and(&grad).for_each(|w, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }

    /// First and second moments of one parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<&(ArrayD<T>, ArrayD<T>)> {
        self.moments.get(id.0).and_then(|m| m.as_ref())
    }

    pub fn set_moments(&mut self, id: ParamId, m: ArrayD<T>, v: ArrayD<T>) {
        self.moments[id.0] = Some((m, v));
    }
}
