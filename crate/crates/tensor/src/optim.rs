use std::collections::HashMap;

use crate::{Gradients, ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr` to every parameter with a
    /// gradient. Parameters are visited in id order so updates are
    /// reproducible.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut updates: Vec<(ParamId, &Tensor<T>)> = grads.params().collect();
        updates.sort_by_key(|(id, _)| *id);
        for (id, grad) in updates {
            if !store.is_trainable(id) {
                continue;
            }
            let n = grad.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let param = store.value_mut(id).data_mut();
            for i in 0..n {
                let mut g = grad.data()[i].f64();
                if weight_decay != 0.0 {
                    g += weight_decay * param[i].f64();
                }
                let mi = beta1 * m[i].f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].f64() + (1.0 - beta2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                param[i] = T::of(param[i].f64() - update);
            }
        }
    }
}
