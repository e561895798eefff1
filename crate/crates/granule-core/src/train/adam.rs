//! Adam with bias correction.
//!
//! m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,
//! m̂ = m/(1−β₁ᵗ),  v̂ = v/(1−β₂ᵗ),  θ ← θ − α·m̂/(√v̂ + ε).
//!
//! No weight decay. State is kept per parameter name so frozen parameters
//! simply never acquire moments.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: HashMap<String, Moments>,
    step_count: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step over the given (name, parameter, gradient)
    /// triples. The counter increments exactly once per call.
    pub fn step<'a, I>(&mut self, config: &TrainConfig, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<f32>, &'a Tensor<f32>)>,
    {
        self.step_count += 1;
        let t = self.step_count as i32;
        let beta1 = config.beta1 as f32;
        let beta2 = config.beta2 as f32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let lr = config.learning_rate as f32;
        let eps = config.adam_eps as f32;

        for (name, param, grad) in pairs {
            if param.shape() != grad.shape() {
                return Err(Error::Optimizer {
                    name: name.to_string(),
                    message: format!(
                        "gradient shape {:?} does not match parameter shape {:?}",
                        grad.shape(),
                        param.shape()
                    ),
                });
            }
            let numel = param.numel();
            let moments = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; numel],
                v: vec![0.0; numel],
            });
            if moments.m.len() != numel {
                return Err(Error::Optimizer {
                    name: name.to_string(),
                    message: format!(
                        "moment buffers hold {} elements, parameter has {numel}",
                        moments.m.len()
                    ),
                });
            }
            let values = param.data_mut();
            for (((value, &g), m), v) in values
                .iter_mut()
                .zip(grad.data())
                .zip(moments.m.iter_mut())
                .zip(moments.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *value -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f32) -> Tensor<f32> {
        Tensor::from_vec(vec![1], vec![value]).unwrap()
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_fixed_point() {
        let mut state = AdamState::new();
        let config = TrainConfig::default();
        let mut theta = scalar(1.25);
        let zero = scalar(0.0);
        for _ in 0..5 {
            let pairs = vec![("w", &mut theta, &zero)];
            state.step(&config, pairs).unwrap();
        }
        assert_eq!(theta.data()[0].to_bits(), 1.25f32.to_bits());
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // θ=1, g=0.5, α=0.001: m̂=0.5, v̂=0.25, Δ=0.001·0.5/(0.5+1e-8)
        let mut state = AdamState::new();
        let config = TrainConfig::default();
        let mut theta = scalar(1.0);
        let grad = scalar(0.5);
        state.step(&config, vec![("w", &mut theta, &grad)]).unwrap();
        assert!(
            (theta.data()[0] - 0.999).abs() < 1e-6,
            "got {}",
            theta.data()[0]
        );
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut state = AdamState::new();
        let config = TrainConfig::default();
        let mut theta = scalar(0.7);
        let grad = scalar(0.3);
        let mut previous = theta.data()[0];
        for _ in 0..100 {
            state.step(&config, vec![("w", &mut theta, &grad)]).unwrap();
            let current = theta.data()[0];
            assert!(current < previous, "{current} !< {previous}");
            previous = current;
        }
    }

    #[test]
    fn nonzero_gradient_changes_every_element() {
        let mut state = AdamState::new();
        let config = TrainConfig::default();
        let mut theta = Tensor::from_vec(vec![3], vec![0.1f32, -0.2, 0.3]).unwrap();
        let before = theta.clone();
        let grad = Tensor::from_vec(vec![3], vec![0.5f32, -0.1, 0.9]).unwrap();
        state.step(&config, vec![("w", &mut theta, &grad)]).unwrap();
        for (a, b) in theta.data().iter().zip(before.data()) {
            assert_ne!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let mut state = AdamState::new();
        let config = TrainConfig::default();
        let mut theta = Tensor::zeros(vec![2]);
        let grad = Tensor::zeros(vec![3]);
        let err = state
            .step(&config, vec![("head.fc1.weight", &mut theta, &grad)])
            .unwrap_err();
        match err {
            Error::Optimizer { name, .. } => assert_eq!(name, "head.fc1.weight"),
            other => panic!("expected optimizer error, got {other:?}"),
        }
    }
}
