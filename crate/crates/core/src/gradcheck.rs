//! Central-difference check of the analytic gradients.

use crate::error::Result;
use crate::model::{BlockVariant, ModelParams, ModelShape};
use crate::taskgen::sample_tasks;
use crate::tensor::RngState;
use crate::train::{loss, loss_and_gradients};

pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub variant: BlockVariant,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.rel_error)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// The model checked by default: 2 blocks, width 3, hidden 4, 5 tokens, 2 tasks.
pub fn tiny_shape(variant: BlockVariant) -> ModelShape {
    ModelShape {
        variant,
        blocks: 2,
        width: 3,
        heads: 3,
        head_dim: 1,
        hidden: 4,
        ln_eps: 1e-5,
        positions: None,
    }
}

/// Compares every analytic gradient coordinate against a central difference.
pub fn gradient_check(params: &ModelParams, seed: u64, seq_len: usize, batch: usize) -> Result<GradCheckReport> {
    let input_dim = params.width() - 1;
    let tasks = sample_tasks(&mut RngState::substream(seed, "gradcheck"), batch, seq_len, input_dim);
    let (inputs, targets) = (tasks.sequences(), tasks.targets());
    let (_, grads) = loss_and_gradients(params, &inputs, &targets)?;

    let batch_loss = |p: &ModelParams| -> Result<f64> {
        let preds = inputs.iter().map(|x| p.predict(x)).collect::<Result<Vec<_>>>()?;
        loss(&preds, &targets)
    };

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut probe = params.clone();
    let mut coordinates = Vec::new();
    for (t, name) in names.iter().enumerate() {
        for k in 0..analytic[t].len() {
            let orig = probe.tensors_mut()[t][k];
            probe.tensors_mut()[t][k] = orig + FD_STEP;
            let up = batch_loss(&probe)?;
            probe.tensors_mut()[t][k] = orig - FD_STEP;
            let down = batch_loss(&probe)?;
            probe.tensors_mut()[t][k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[t][k];
            coordinates.push(CoordinateCheck {
                tensor: name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport {
        variant: params.variant,
        coordinates,
    })
}

/// Gradient check of the freshly initialised tiny model.
pub fn tiny_gradient_check(variant: BlockVariant, seed: u64) -> Result<GradCheckReport> {
    let params = ModelParams::init(&mut RngState::substream(seed, "init"), &tiny_shape(variant));
    gradient_check(&params, seed, 5, 2)
}
