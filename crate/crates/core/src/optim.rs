//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.tensors[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = beta1 * m.data[j] + (1.0 - beta1) * gj;
                v.data[j] = beta2 * v.data[j] + (1.0 - beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global ℓ₂ norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamSet::default();
        ps.add("x", Matrix::row_vector(&[3.0, -2.0]));
        let mut opt = Adam::new(
            &ps,
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..300 {
            let g = ps.tensors[0].map(|x| 2.0 * x);
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.tensors[0].sum_sq() < 1e-3);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Matrix::row_vector(&[3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sum_sq().sqrt() - 1.0).abs() < 1e-12);
        let mut g = vec![Matrix::row_vector(&[0.3, 0.4])];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].data, vec![0.3, 0.4]);
    }
}
