use serde::{Deserialize, Serialize};

use super::{MlpGrads, MlpParams};
use crate::error::{Error, Result};

/// Piecewise-constant learning rate: `initial` for the first
/// `switch_frac` share of the step budget, `late` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub late: f64,
    pub switch_frac: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            late: 1e-4,
            switch_frac: 0.6,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            late: lr,
            switch_frac: 1.0,
        }
    }

    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        if (step as f64) < self.switch_frac * total_steps as f64 {
            self.initial
        } else {
            self.late
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: MlpGrads,
    v: MlpGrads,
}

impl AdamState {
    pub fn new(params: &MlpParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            step: 0,
            beta1,
            beta2,
            epsilon,
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
        }
    }

    pub fn with_defaults(params: &MlpParams) -> Self {
        AdamState::new(params, 0.9, 0.999, 1e-8)
    }

    /// One Adam update. Rejects non-finite gradients so a diverging stage
    /// aborts instead of silently poisoning the parameters.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::invalid("non-finite gradient in Adam update"));
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let eps = self.epsilon;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for l in 0..params.weights.len() {
            update(
                &mut params.weights[l],
                &grads.weights[l],
                &mut self.m.weights[l],
                &mut self.v.weights[l],
            );
            update(
                &mut params.biases[l],
                &grads.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_xavier, Activation, MlpArchitecture, OutputActivation};

    fn scalar_params(theta: f64) -> MlpParams {
        let arch = MlpArchitecture::new(
            1,
            1,
            vec![1],
            Activation::Relu,
            OutputActivation::Linear,
        )
        .unwrap();
        MlpParams {
            arch,
            weights: vec![vec![theta], vec![0.0]],
            biases: vec![vec![0.0], vec![0.0]],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let arch = MlpArchitecture::new(
            2,
            1,
            vec![3],
            Activation::Relu,
            OutputActivation::Linear,
        )
        .unwrap();
        let mut p = init_xavier(&arch, 4);
        let before = p.clone();
        let g = MlpGrads::zeros_like(&p);
        let mut adam = AdamState::with_defaults(&p);
        adam.step(&mut p, &g, 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_recursion() {
        // theta=1, g=2, lr=0.01: m_hat=2, v_hat=4, update = 0.01*2/(2+eps)
        let mut p = scalar_params(1.0);
        let mut g = MlpGrads::zeros_like(&p);
        g.weights[0][0] = 2.0;
        let mut adam = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &g, 0.01).unwrap();
        assert!((p.weights[0][0] - 0.99).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_keeps_unit_scaled_updates() {
        let mut p = scalar_params(1.0);
        let mut g = MlpGrads::zeros_like(&p);
        g.weights[0][0] = 3.0;
        let mut adam = AdamState::new(&p, 0.9, 0.999, 1e-8);
        let lr = 0.01;
        let mut prev = p.weights[0][0];
        for _ in 0..2 {
            adam.step(&mut p, &g, lr).unwrap();
            let moved = prev - p.weights[0][0];
            // bias-corrected m_hat = g, v_hat = g^2 exactly for constant g
            assert!((moved - lr).abs() < 1e-6, "update {moved}");
            prev = p.weights[0][0];
        }
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = scalar_params(1.0);
        let mut g = MlpGrads::zeros_like(&p);
        g.weights[0][0] = f64::NAN;
        let mut adam = AdamState::with_defaults(&p);
        assert!(adam.step(&mut p, &g, 0.01).is_err());
    }
}
