//! Adam with a linear warmup.

use crate::model::{ModelConfig, Parameters};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPSILON: f32 = 1e-8;

/// `base * min(1, step / warmup)` for a 1-based `step`.
pub fn learning_rate(base: f32, warmup: u64, step: u64) -> f32 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f32 / warmup as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Parameters<f32>,
    v: Parameters<f32>,
    step: u64,
}

impl Adam {
    pub fn new(config: &ModelConfig) -> Self {
        Adam {
            m: Parameters::zeros(config),
            v: Parameters::zeros(config),
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>, lr: f32) {
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, _, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp() {
        assert_eq!(learning_rate(5e-5, 4, 1), 5e-5 * 0.25);
        assert_eq!(learning_rate(5e-5, 4, 2), 5e-5 * 0.5);
        assert_eq!(learning_rate(5e-5, 4, 4), 5e-5);
        assert_eq!(learning_rate(5e-5, 4, 100), 5e-5);
        assert_eq!(learning_rate(1e-3, 0, 1), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let config = ModelConfig {
            layers: 1,
            heads: 1,
            hidden: 2,
            intermediate: 2,
            max_seq_len: 4,
            vocab_size: 6,
        };
        let mut params = Parameters::zeros(&config);
        let mut grads = Parameters::zeros(&config);
        grads.lm_bias[0] = 3.0;
        grads.lm_bias[1] = -0.5;
        let mut adam = Adam::new(&config);
        adam.update(&mut params, &grads, 0.1);
        // With bias correction the first update is lr * g / (|g| + eps).
        assert!((params.lm_bias[0] + 0.1).abs() < 1e-6);
        assert!((params.lm_bias[1] - 0.1).abs() < 1e-6);
        assert_eq!(params.lm_bias[2], 0.0);
        assert_eq!(adam.step(), 1);
    }
}
