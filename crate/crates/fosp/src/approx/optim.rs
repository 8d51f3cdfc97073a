//! Adaptive-moment optimizer with bias correction.

use super::ParameterVector;
use crate::{FospError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_len: usize, learning_rate: f64) -> OptimizerState {
        OptimizerState {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One optimizer step in place. The update direction opposes the gradient;
/// a zero gradient leaves parameters untouched.
pub fn optimizer_step(params: &mut ParameterVector, grad: &ParameterVector, state: &mut OptimizerState) -> Result<()> {
    if grad.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(FospError::shape(
            "optimizer_step",
            format!("{}", params.len()),
            format!("grad {} / moments {}", grad.len(), state.first_moment.len()),
        ));
    }
    if !grad.all_finite() {
        return Err(FospError::non_finite("optimizer_step", "gradient"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for ((p, g), (m, v)) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Scales the gradient so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grad: &mut ParameterVector, max_norm: f64) -> f64 {
    let norm = grad.values().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.values_mut() {
            *g *= scale;
        }
    }
    norm
}
