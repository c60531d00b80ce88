use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("parameter ({params}) and gradient ({grad}) lengths differ")]
    LengthMismatch { params: usize, grad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One Adam step in place. A non-finite gradient leaves both the
    /// parameters and the state untouched.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        if params.len() != grad.len() || self.m.len() != grad.len() {
            return Err(OptimError::LengthMismatch {
                params: params.len(),
                grad: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let step = cfg.lr / c1;
        let sc2 = libm::sqrt(c2);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= step * *m / (libm::sqrt(*v) / sc2 + cfg.eps);
        }
        Ok(())
    }
}

/// Exponential moving average of parameters, `s <- r s + (1 - r) p`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    pub shadow: Vec<f64>,
    pub rate: f64,
}

impl EmaParams {
    pub fn new(initial: &[f64], rate: f64) -> Self {
        Self {
            shadow: initial.to_vec(),
            rate,
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        let r = self.rate;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = r * *s + (1.0 - r) * p;
        }
    }
}
