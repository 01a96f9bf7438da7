use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Parameters;

/// Bias-corrected Adam with optional L2 weight decay folded into the gradient.
/// Moment buffers are keyed by parameter name and created only for trainable tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn n_buffers(&self) -> usize {
        self.moments.len()
    }

    pub fn has_buffer(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Updates every trainable tensor from its grad buffer. Frozen and
    /// constant tensors are skipped. All grads are checked before anything moves.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) -> Result<()> {
        let mut missing = None;
        params.visit(&mut |name, t| {
            if missing.is_none() && t.is_trainable() && t.grad().is_none() {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::State(format!(
                "trainable parameter {name} has no gradient"
            )));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, tensor| {
            if !tensor.is_trainable() {
                return;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] + wd * data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
