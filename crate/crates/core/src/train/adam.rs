use serde::{Deserialize, Serialize};

use crate::capsnet::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamBlock {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamBlock {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of a single block at step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamBlock, t: u64, lr: f64, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/state length mismatch");
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over all parameter blocks of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub blocks: Vec<AdamBlock>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Parameter], config: AdamConfig) -> Self {
        Self {
            config,
            blocks: params.iter().map(|p| AdamBlock::new(p.value.len())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Parameter], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.blocks) {
            adam_step(p.value.data_mut(), g, s, self.t, lr, &self.config);
        }
    }
}
