//! Adam with decoupled weight decay, global-norm clipping and a step schedule.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value; `0` disables clipping.
    pub max_grad_norm: f64,
    /// Fraction of total steps after which the learning rate drops.
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 0.1,
            decay_at: 0.8,
            decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps > 0 && step as f64 >= self.decay_at * total_steps as f64 {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        AdamW {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip
    /// gradient norm. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Option<Tensor>], lr: f64) -> f64 {
        let cfg = &self.config;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let norm = grads
            .iter()
            .flatten()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt();
        if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            let s = cfg.max_grad_norm / (norm + 1e-6);
            grads.iter_mut().flatten().for_each(|g| g.scale_inplace(s));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else {
                continue;
            };
            let i = id.index();
            let (rows, cols) = g.shape();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let p = store.value_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
                *pv -= lr * (update + cfg.weight_decay * *pv);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(1, 2, vec![3.0, -2.0]), true);
        let b = store.add("b", Tensor::scalar(5.0), false);
        let mut opt = AdamW::new(OptimizerConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            ..OptimizerConfig::default()
        });
        for _ in 0..500 {
            let x = store.value(a).clone();
            let mut grads = vec![Some(x.map(|v| 2.0 * v)), Some(Tensor::scalar(1.0))];
            opt.step(&mut store, &mut grads, 0.05);
        }
        assert!(store.value(a).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.value(b).item(), 5.0);
    }

    #[test]
    fn step_decay() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at(0, 10), 1e-4);
        assert_eq!(cfg.lr_at(7, 10), 1e-4);
        assert!((cfg.lr_at(8, 10) - 1e-5).abs() < 1e-20);
    }
}
