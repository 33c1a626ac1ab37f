use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

/// Adaptive-moment optimizer over one [`Parameterized`] module.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, params: &mut M, grads: &M) {
        let mut g = Vec::new();
        grads.visit_params("", &mut |_, _, v| g.extend_from_slice(v));
        if self.m.len() != g.len() {
            self.m = vec![T::zero(); g.len()];
            self.v = vec![T::zero(); g.len()];
            self.step = 0;
        }
        if let Some(max_norm) = self.config.max_grad_norm {
            let norm = g.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            let max_norm: T = lit(max_norm);
            if norm > max_norm {
                let f = max_norm / norm;
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr: T = lit(c.learning_rate);
        let eps: T = lit(c.eps);
        let decay: T = lit(c.learning_rate * c.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_params_mut("", &mut |_, _, p| {
            for x in p.iter_mut() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps) + decay * *x;
                i += 1;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::{array, Array1};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Linear {
            weight: array![[1.0f64, -1.0]],
            bias: Array1::zeros(1),
        };
        let g = Linear {
            weight: array![[0.5f64, -2.0]],
            bias: array![0.0],
        };
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&mut p, &g);
        // Bias-corrected first step is lr * sign(g).
        assert!((p.weight[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.weight[[0, 1]] + 0.9).abs() < 1e-6);
        assert_eq!(p.bias[0], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Linear {
            weight: array![[3.0f64]],
            bias: array![-2.0],
        };
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            let g = Linear {
                weight: p.weight.mapv(|w| 2.0 * (w - 1.0)),
                bias: p.bias.mapv(|b| 2.0 * b),
            };
            opt.step(&mut p, &g);
        }
        assert!((p.weight[[0, 0]] - 1.0).abs() < 1e-3);
        assert!(p.bias[0].abs() < 1e-3);
    }
}
