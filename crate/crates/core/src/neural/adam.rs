use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

/// Bias-corrected ADAM. Defaults match the common framework settings
/// (betas 0.9 / 0.999, eps 1e-8).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(HedgeError::InvalidInput(format!(
                "adam state sized for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001, both bias corrections give 1: -1e-3 / (1 + 1e-8)
        let mut adam = AdamState::new(1, 1e-3);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - (-0.000_999_999_990_000_000_1)).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn identical_params_move_identically() {
        let mut adam = AdamState::new(2, 1e-2);
        let mut p = vec![0.3, 0.3];
        for g in [0.5, -1.0, 2.0] {
            adam.step(&mut p, &[g, g]).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = AdamState::new(2, 1e-3);
        assert!(adam.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
