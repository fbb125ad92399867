use ndarray::{ArrayD, Zip};

use super::params::Parameters;
use crate::real::Real;

/// Adam with bias correction; moment buffers are created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Self::new(F::lit(0.9), F::lit(0.999), F::lit(1e-8))
    }
}

impl<F: Real> Adam<F> {
    pub fn new(beta1: F, beta2: F, eps: F) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step<M: Parameters<F>>(&mut self, params: &mut M, grads: &M, lr: F) {
        let mut g = Vec::new();
        grads.visit("", &mut |_, a| g.push(a.to_owned()));
        if self.m.is_empty() {
            self.m = g.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = F::one() - b1.powi(self.step);
        let c2 = F::one() - b2.powi(self.step);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, mut p| {
            Zip::from(&mut p)
                .and(&g[i])
                .and(&mut ms[i])
                .and(&mut vs[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            i += 1;
        });
    }
}

/// Cosine annealing from `lr` at epoch 0 to `lr_min` at the final epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, lr: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let progress = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 40, 1e-3, 1e-5), 1e-3);
        assert!(cosine_lr(39, 40, 1e-3, 1e-5) <= 1e-5 + 1e-9);
        let mid = cosine_lr(20, 41, 1.0, 0.0);
        assert!((mid - 0.5).abs() < 1e-12);
    }
}
