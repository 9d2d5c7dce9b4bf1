//! Adam with bias correction, plus the square-root learning-rate decay.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate: 1e-3,
        }
    }
}

/// Optimizer state: first/second moment accumulators matching the parameter
/// shapes, and a step counter that increases by exactly one per update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update, in place. Non-finite gradients are an
/// error so the training loop can decide whether to skip or abort.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.numel() != g.numel() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
                context: "adam_step",
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(format!("param[{i}]")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = p.data_mut();
        for i in 0..data.len() {
            let gi = g.data()[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

/// Constant learning rate up to `decay_start`, then square-root decay:
/// `base_lr * sqrt(decay_start / step)`.
pub fn lr_schedule(step: u64, base_lr: f64, decay_start: u64) -> f64 {
    if step <= decay_start || decay_start == 0 {
        base_lr
    } else {
        base_lr * (decay_start as f64 / step as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut params = vec![Tensor::from_vec(vec![2], vec![0.0, 0.0])];
        let grads = vec![Tensor::from_vec(vec![2], vec![1.0, -1.0])];
        let hyper = AdamHyper {
            learning_rate: 0.1,
            epsilon: 1e-16,
            ..Default::default()
        };
        let mut state = AdamState::new(&params, hyper);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let p = params[0].data();
        assert!((p[0] + 0.1).abs() < 1e-9, "got {}", p[0]);
        assert!((p[1] - 0.1).abs() < 1e-9, "got {}", p[1]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params, AdamHyper::default());
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_steps_match_reference_implementation() {
        // Hand-rolled reference Adam, written independently of adam_step.
        let g = 0.3f64;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x_ref = 1.0f64;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let mut params = vec![Tensor::from_vec(vec![1], vec![1.0])];
        let grads = vec![Tensor::from_vec(vec![1], vec![g])];
        let hyper = AdamHyper {
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            learning_rate: lr,
        };
        let mut state = AdamState::new(&params, hyper);
        adam_step(&mut params, &grads, &mut state).unwrap();
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert!((params[0].data()[0] - x_ref).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut params = vec![Tensor::from_vec(vec![1], vec![1.0])];
        let grads = vec![Tensor::from_vec(vec![1], vec![f64::NAN])];
        let mut state = AdamState::new(&params, AdamHyper::default());
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn sqrt_decay_schedule() {
        assert_eq!(lr_schedule(0, 1e-3, 35_000), 1e-3);
        assert_eq!(lr_schedule(35_000, 1e-3, 35_000), 1e-3);
        let quarter = lr_schedule(4 * 35_000, 1e-3, 35_000);
        assert!((quarter - 5e-4).abs() < 1e-18, "got {quarter}");
    }
}
