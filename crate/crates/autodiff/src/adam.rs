//! Adaptive-moment optimizer with bias correction.

use crate::params::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    /// State for a parameter set with `n_values` scalars and the standard constants.
    pub fn new(n_values: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_values], v: vec![0.0; n_values], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update `θ ← θ - lr · m̂ / (√v̂ + eps)`.
    ///
    /// # Panics
    /// If `params`, `grads` and the state disagree in size.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        let g = grads.flat();
        assert_eq!(g.len(), self.m.len(), "gradient size does not match optimizer state");
        let mut theta = params.flat();
        assert_eq!(theta.len(), self.m.len(), "parameter size does not match optimizer state");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.set_flat(&theta).expect("sizes checked above");
    }
}
