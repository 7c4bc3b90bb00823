use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len(), self.first_moment.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[vec![1.0, -1.0]]).unwrap();
        let (m1, v1) = (state.first_moment()[0].clone(), state.second_moment()[0].clone());
        state.step(&mut params, &[vec![0.0, 0.0]]).unwrap();
        for i in 0..2 {
            assert!(state.first_moment()[0][i].abs() < m1[i].abs());
            assert!(state.second_moment()[0][i] < v1[i]);
        }
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // t = 1: m̂ = g, v̂ = g², update = lr · g / (|g| + ε).
        let g = [0.5, -3.0, 1e-4];
        let mut params = vec![Tensor::vector(vec![0.0; 3]).unwrap()];
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&params, cfg);
        state.step(&mut params, &[g.to_vec()]).unwrap();
        for (w, gi) in params[0].data().iter().zip(g) {
            let expected = -cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn identical_states_step_identically() {
        let params = vec![Tensor::vector(vec![0.3, 0.7]).unwrap()];
        let state = AdamState::new(&params, AdamConfig::default());
        let (mut p1, mut s1) = (params.clone(), state.clone());
        let (mut p2, mut s2) = (params, state);
        s1.step(&mut p1, &[vec![0.1, -0.2]]).unwrap();
        s2.step(&mut p2, &[vec![0.1, -0.2]]).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::vector(vec![0.0; 2]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = state.step(&mut params, &[vec![0.0; 3]]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "adam_step", .. }));
        assert_eq!(state.step_count(), 0);
    }
}
