use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        Self {
            lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam with bias correction and linear warmup.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[v.len()], v).unwrap()).unwrap();
        s
    }

    #[test]
    fn warmup_ramp() {
        let c = AdamConfig::new(1e-3, 100);
        assert!((c.lr_at(50) - 5e-4).abs() < 1e-18);
        assert_eq!(c.lr_at(100), 1e-3);
        assert_eq!(c.lr_at(1000), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(vec![1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::new(1e-3, 0), &p);
        let mut g = Grads::zeros_like(&p);
        g.get_mut(crate::nn::ParamId(0)).data_mut().copy_from_slice(&[3.0, -0.5]);
        adam.step(&mut p, &g).unwrap();
        let w = p.by_name("w").unwrap().data();
        // step 1: m_hat = g, v_hat = g^2, update = lr * |g| / (|g| + eps)
        assert!((w[0] - (1.0 - 1e-3 * 3.0 / (3.0 + 1e-6))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 1e-3 * 0.5 / (0.5 + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut p = store(vec![0.25, 4.0]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::new(1e-2, 10), &p);
        let g = Grads::zeros_like(&p);
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }
}
