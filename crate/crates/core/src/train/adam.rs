use super::backward::GradientSet;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Adam with bias-corrected moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = params.num_parameters();
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            learning_rate,
            beta1,
            beta2,
            eps,
        }
    }

    /// `β₁ = 0.9`, `β₂ = 0.999`, `eps = 1e-8`, `η = 5e-2`.
    pub fn with_defaults(params: &ModelParams) -> Self {
        OptimizerState::new(params, 5e-2, 0.9, 0.999, 1e-8)
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    let g = grads.flatten();
    if g.len() != state.m.len() || g.len() != params.num_parameters() {
        return Err(Error::dims(
            "adam_step",
            format!("{} parameters", state.m.len()),
            format!("{} gradients", g.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut k = 0;
    for tensor in params.tensors_mut() {
        for theta in tensor.iter_mut() {
            let gk = g[k];
            state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * gk;
            state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * gk * gk;
            let m_hat = state.m[k] / bc1;
            let v_hat = state.v[k] / bc2;
            *theta -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
            k += 1;
        }
    }
    Ok(())
}
