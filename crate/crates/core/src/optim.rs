//! Adam optimizer and the warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First/second moments, keyed by the same order as the parameter list
    /// they were created for.
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Default hyperparameters (0.9 / 0.999 / 1e-8); these are config
    /// defaults, adjustable per run.
    pub fn new(param_shapes: &[Vec<usize>]) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn with_hyper(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    /// One bias-corrected Adam update over a parameter list. `grads[i]` may
    /// be `None` (parameter untouched this step, moments still decay).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: {} params vs {} states vs {} grads",
                params.len(),
                self.m.len(),
                grads.len()
            )));
        }
        if lr < 0.0 {
            return Err(Error::contract(format!("adam: negative lr {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != params[i].shape() {
                return Err(Error::contract(format!(
                    "adam: grad shape {:?} vs param shape {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then cosine decay to `lr_final`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_peak: f64,
    pub lr_final: f64,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, total_steps: u64, lr_peak: f64, lr_final: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::config(format!(
                "warmup_steps {warmup_steps} > total_steps {total_steps}"
            )));
        }
        if lr_peak < 0.0 || lr_final < 0.0 {
            return Err(Error::config("negative learning rate"));
        }
        Ok(LrSchedule {
            warmup_steps,
            total_steps,
            lr_peak,
            lr_final,
        })
    }

    /// Learning rate at `step` in `[0, total_steps]`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "step {step} out of range 0..={}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_peak * step as f64 / self.warmup_steps as f64);
        }
        let decay_span = self.total_steps - self.warmup_steps;
        if decay_span == 0 {
            return Ok(if step == self.total_steps && self.total_steps > 0 {
                self.lr_final
            } else {
                self.lr_peak
            });
        }
        if step == self.total_steps {
            return Ok(self.lr_final);
        }
        let frac = (step - self.warmup_steps) as f64 / decay_span as f64;
        let cos = (std::f64::consts::PI * frac).cos();
        Ok(self.lr_final + (self.lr_peak - self.lr_final) * 0.5 * (1.0 + cos))
    }
}
