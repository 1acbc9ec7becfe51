//! Adam with bias correction.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::math;
use crate::model::NamedTensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },
    #[error("gradient count {got} does not match parameter count {expect}")]
    CountMismatch { got: usize, expect: usize },
    #[error("gradient shape mismatch for parameter '{name}'")]
    ShapeMismatch { name: String },
}

/// Hyperparameters of the update rule.
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[NamedTensor]) -> Self {
        let zeros = |p: &NamedTensor| Tensor::zeros(p.tensor.rows(), p.tensor.cols());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Aborts without touching the parameters
/// if any gradient is non-finite.
pub fn adam_step(
    params: &mut [NamedTensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::CountMismatch {
            got: grads.len(),
            expect: params.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.tensor.shape() {
            return Err(OptimError::ShapeMismatch {
                name: p.name.clone(),
            });
        }
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm_powi(cfg.beta1, t);
    let bc2 = 1.0 - libm_powi(cfg.beta2, t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for ((theta, &grad), (m_i, v_i)) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m_i = cfg.beta1 * *m_i + (1.0 - cfg.beta1) * grad;
            *v_i = cfg.beta2 * *v_i + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = *m_i / bc1;
            let v_hat = *v_i / bc2;
            *theta -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

fn libm_powi(base: f64, exp: i32) -> f64 {
    let mut out = 1.0;
    for _ in 0..exp {
        out *= base;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn scalar_param(x: f64) -> Vec<NamedTensor> {
        alloc::vec![NamedTensor {
            name: "x".to_string(),
            tensor: Tensor::scalar(x),
        }]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = scalar_param(1.5);
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &[Tensor::scalar(0.0)],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(params[0].tensor.scalar_value(), 1.5);
        assert_eq!(state.t, 1);
    }

    // First-step identity: with bias correction, the very first update is
    // lr * g / (|g| + eps), i.e. almost exactly lr in the descent direction.
    #[test]
    fn first_step_on_quadratic_moves_by_learning_rate() {
        let mut params = scalar_param(1.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        // f(x) = x^2, gradient at x0 = 1 is 2
        adam_step(&mut params, &[Tensor::scalar(2.0)], &mut state, &cfg).unwrap();
        let expect = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8));
        assert!((params[0].tensor.scalar_value() - expect).abs() < 1e-12);
        assert!((params[0].tensor.scalar_value() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = scalar_param(0.7);
            let mut state = AdamState::new(&params);
            let cfg = AdamConfig::default();
            for step in 0..10 {
                let x = params[0].tensor.scalar_value();
                let g = 2.0 * x + (step as f64) * 0.01;
                adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
            }
            params[0].tensor.scalar_value().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut params = scalar_param(1.0);
        let mut state = AdamState::new(&params);
        let err = adam_step(
            &mut params,
            &[Tensor::scalar(f64::NAN)],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient { .. }));
        assert_eq!(params[0].tensor.scalar_value(), 1.0);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut params = scalar_param(3.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let g = 2.0 * params[0].tensor.scalar_value();
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
        }
        assert!(params[0].tensor.scalar_value().abs() < 1e-2);
    }
}
