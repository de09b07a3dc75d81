use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio,
            total_steps,
        }
    }

    pub fn adam(learning_rate: f64, total_steps: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            warmup_ratio: 0.0,
            ..Self::adamw(learning_rate, 0.0, total_steps)
        }
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate applied at 0-based step `step`: linear ramp from 0 over
    /// the warmup window, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if w == 0 || step >= w {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / w as f64
        }
    }
}

/// Adam / AdamW state over an explicit set of trainable parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step_count: usize,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    /// Registers `params`; any frozen parameter is rejected.
    pub fn new(config: OptimizerConfig, store: &ParamStore, params: &[ParamId]) -> Result<Self> {
        ensure!(config.learning_rate > 0.0, "learning rate must be positive");
        ensure!(
            (0.0..=1.0).contains(&config.warmup_ratio),
            "warmup ratio must lie in [0,1]"
        );
        for &id in params {
            if store.is_frozen(id) {
                return Err(Error::Invariant(format!(
                    "cannot register frozen parameter {} with an optimizer",
                    store.name(id)
                )));
            }
        }
        let mut sorted = params.to_vec();
        sorted.sort();
        sorted.dedup();
        let m = sorted.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        let v = sorted.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        Ok(Self {
            config,
            step_count: 0,
            params: sorted,
            m,
            v,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step_count)
    }

    /// Applies one update. `grads` must cover exactly the registered set.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        ensure!(
            grads.len() == self.params.len() && self.params.iter().all(|&id| grads.contains(id)),
            "gradient set ({} entries) does not match the {} registered parameters",
            grads.len(),
            self.params.len()
        );
        let lr = self.current_lr();
        let c = &self.config;
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, &id) in self.params.iter().enumerate() {
            let g = grads.get(id).expect("checked above");
            let p = store.get_mut(id)?;
            ensure!(p.len() == g.len(), "gradient length mismatch for {:?}", id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                if c.kind == OptimizerKind::AdamW {
                    *x -= lr * c.weight_decay * *x;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row_vector(vec![v])).unwrap();
        (store, id)
    }

    fn grads_of(id: ParamId, g: f64) -> Gradients {
        Gradients::from_pairs(vec![(id, vec![g])])
    }

    #[test]
    fn warmup_starts_at_zero() {
        let c = OptimizerConfig::adamw(1e-3, 0.1, 100);
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(5), 5e-4);
        assert_eq!(c.lr_at(10), 1e-3);
        assert_eq!(c.lr_at(99), 1e-3);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let (mut store, id) = one_param(0.5);
        let cfg = OptimizerConfig::adam(0.1, 3);
        let mut opt = Optimizer::new(cfg, &store, &[id]).unwrap();
        // Independent recurrence, constant gradient 1.0.
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            m = 0.9 * m + (1.0 - 0.9);
            v = 0.999 * v + (1.0 - 0.999);
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            opt.step(&mut store, &grads_of(id, 1.0)).unwrap();
        }
        assert_eq!(store.get(id).data()[0], x);
        // With constant gradients the bias-corrected step is ~lr each time.
        assert!((x - (0.5 - 0.3)).abs() < 1e-6);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut store, id) = one_param(2.0);
        let cfg = OptimizerConfig::adamw(0.1, 0.0, 10);
        let mut opt = Optimizer::new(cfg, &store, &[id]).unwrap();
        opt.step(&mut store, &grads_of(id, 0.0)).unwrap();
        assert_eq!(store.get(id).data()[0], 2.0 - 0.1 * 0.01 * 2.0);

        let (mut store, id) = one_param(2.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 10), &store, &[id]).unwrap();
        opt.step(&mut store, &grads_of(id, 0.0)).unwrap();
        assert_eq!(store.get(id).data()[0], 2.0);
    }

    #[test]
    fn frozen_registration_and_mismatched_grads_are_rejected() {
        let (mut store, id) = one_param(1.0);
        let other = store.insert("u", Tensor::row_vector(vec![1.0])).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 1), &store, &[id]).unwrap();
        assert!(opt.step(&mut store, &grads_of(other, 1.0)).is_err());
        store.freeze(id);
        assert!(Optimizer::new(OptimizerConfig::adam(0.1, 1), &store, &[id]).is_err());
    }
}
