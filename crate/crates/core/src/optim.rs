//! Small numeric optimizers: Adam with bias correction, plain SGD, and a
//! cosine-annealed learning-rate schedule.
//!
//! Everything here operates on flat `f64` slices so the same code serves both
//! pixel-space perturbations and encoder parameter vectors.

use crate::error::{Error, Result};

/// Adam with the standard bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    /// Fresh state for a parameter vector of `len` elements, with the
    /// conventional `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One descent step in place. `params` and `grad` must match the length
    /// given at construction.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "Adam state length mismatch");
        assert_eq!(grad.len(), self.m.len(), "Adam gradient length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Plain stochastic gradient descent: `p <- p - lr * g`. No momentum.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "SGD gradient length mismatch");
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
    }
}

/// Cosine annealing from an initial rate down to zero over a fixed horizon:
///
/// `lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T))`
///
/// so `lr(0) = lr0` and `lr(T) = 0`. Steps past the horizon stay at zero.
#[derive(Debug, Clone, Copy)]
pub struct CosineAnnealing {
    lr0: f64,
    total_steps: usize,
}

impl CosineAnnealing {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        Self { lr0, total_steps: total_steps.max(1) }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Validate that every gradient component is finite, for divergence aborts.
pub fn check_finite(step: usize, grad: &[f64], what: &str) -> Result<()> {
    if let Some((i, v)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            diagnostic: format!("{what} gradient component {i} is {v}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction the very first Adam update is lr * g/|g|
        // (up to eps), independent of gradient magnitude.
        let mut params = vec![1.0, -2.0];
        let mut adam = Adam::new(2);
        adam.step(&mut params, &[0.3, -500.0], 0.01);
        assert!((params[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((params[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = CosineAnnealing::new(0.8, 100);
        assert!((s.lr_at(0) - 0.8).abs() < 1e-15);
        assert!((s.lr_at(50) - 0.4).abs() < 1e-15);
        assert!(s.lr_at(100).abs() < 1e-15);
        // Clamped past the horizon.
        assert!(s.lr_at(250).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_is_monotone_decreasing() {
        let s = CosineAnnealing::new(1.0, 64);
        let mut prev = f64::INFINITY;
        for t in 0..=64 {
            let lr = s.lr_at(t);
            assert!(lr <= prev + 1e-15, "lr increased at step {t}");
            prev = lr;
        }
    }

    #[test]
    fn sgd_is_exact_linear_update() {
        let mut params = vec![0.5, 0.5];
        Sgd::new(0.1).step(&mut params, &[1.0, -2.0]);
        assert_eq!(params, vec![0.5 - 0.1, 0.5 + 0.2]);
    }
}
