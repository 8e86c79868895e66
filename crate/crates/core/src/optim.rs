//! Adam optimizer over flat parameter vectors.

use crate::error::{ensure, ensure_len, Result};

/// Adam with bias correction; state is per parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One in-place update of `params` along `grads` (descent direction).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        ensure_len!("adam params", self.m.len(), params.len());
        ensure_len!("adam grads", self.m.len(), grads.len());
        ensure!(
            grads.iter().all(|g| g.is_finite()),
            "non-finite gradient passed to adam"
        );
        self.steps += 1;
        let b1t = 1.0 - self.beta1.powi(self.steps as i32);
        let b2t = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
