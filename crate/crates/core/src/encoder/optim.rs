use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            first: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    config: &AdamConfig,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].len() != p.len() {
            return Err(OptimError::ShapeMismatch(format!(
                "tensor {i}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - config.beta1.powi(t);
    let correct2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / correct1;
            let v_hat = v[k] / correct2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::new(1, 3, vec![1.0, -2.0, 0.5])];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::zeros(1, 3)];
        for _ in 0..3 {
            adam_step(&mut params, &grads, &AdamConfig::default(), &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // at t = 1, m_hat = g and v_hat = g², so the step is lr·g/(|g|+eps)
        let mut params = vec![Tensor::scalar(2.0)];
        let mut state = AdamState::new(&params);
        let config = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &[Tensor::scalar(1.0)], &config, &mut state).unwrap();
        let expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
        assert!((params[0].item() - 1.9).abs() < 1e-6);
    }

    #[test]
    fn trajectories_repeat() {
        let run = || {
            let mut params = vec![Tensor::new(1, 2, vec![0.3, -0.7])];
            let mut state = AdamState::new(&params);
            for t in 0..20 {
                let g = Tensor::new(1, 2, vec![(t as f64).sin(), params[0].data()[0]]);
                adam_step(&mut params, &[g], &AdamConfig::default(), &mut state).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::zeros(2, 2)];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::zeros(1, 4)], &AdamConfig::default(), &mut state);
        assert!(matches!(err, Err(OptimError::ShapeMismatch(_))));
        let err = adam_step(&mut params, &[], &AdamConfig::default(), &mut state);
        assert!(matches!(err, Err(OptimError::ShapeMismatch(_))));
    }
}
