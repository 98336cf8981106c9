//! Adam with bias correction, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config(format!(
                "adam: lr={} beta1={} beta2={} eps={}",
                self.lr, self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }

    /// Applies one update to `params` using their gradient buffers. Moment
    /// buffers are allocated on the first call and must match afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() && self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|(p, m)| p.numel() != m.len()) {
            return Err(Error::Shape(format!(
                "adam state holds {} buffers, got {} parameters of different sizes",
                self.m.len(),
                params.len()
            )));
        }
        self.t = self
            .t
            .checked_add(1)
            .ok_or_else(|| Error::Contract("adam step counter overflow".into()))?;
        let t = self.t.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (theta, g) = p.value_and_grad_mut();
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all buffers by `max_norm / g` when their joint L2 norm `g`
/// exceeds `max_norm`. Returns `g`.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let g = grads
        .iter()
        .flat_map(|b| b.iter())
        .fold(0.0, |a, x| a + x * x)
        .sqrt();
    if g > max_norm {
        let k = max_norm / g;
        grads.iter_mut().for_each(|b| b.iter_mut().for_each(|x| *x *= k));
    }
    g
}
