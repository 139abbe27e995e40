//! Last-token regression loss, gradients, Adam and the training loop.
//!
//! The training set is a fixed pool of `B` tasks reused at every step. Test
//! losses are measured on freshly sampled tasks from a separate random
//! stream, both directly (the context forward pass) and through the implicit
//! update of the last block at the last token.

mod adam;
mod backward;

pub use adam::{adam_step, OptimizerState};
pub use backward::{block_backward, sequence_backward, tree_sum, GradientSet};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::test_losses;
use crate::model::checkpoint::Checkpoint;
use crate::model::ModelParams;
use crate::taskgen::{sample_tasks, TaskBatch};
use crate::tensor::{Matrix, RngState};

/// Abort threshold for the training loss.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// `(1 / 2B) Σ_b (y_b − ŷ_b)²`.
pub fn loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::dims(
            "loss",
            "equal nonzero lengths",
            format!("{} predictions, {} targets", predictions.len(), targets.len()),
        ));
    }
    let b = predictions.len() as f64;
    let sq: f64 = predictions.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(sq / (2.0 * b))
}

/// Loss and its gradient over a batch of sequences.
///
/// Items are processed in parallel; their gradients are combined by
/// [`tree_sum`], so the result does not depend on the thread count.
pub fn loss_and_gradients(params: &ModelParams, inputs: &[Matrix], targets: &[f64]) -> Result<(f64, GradientSet)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::dims(
            "backward",
            "equal nonzero batch sizes",
            format!("{} inputs, {} targets", inputs.len(), targets.len()),
        ));
    }
    let b = inputs.len() as f64;
    let per_item: Vec<(f64, GradientSet)> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, &y)| {
            let (branches, pred) = params.forward_branches(x)?;
            let grads = sequence_backward(params, &branches, (pred - y) / b)?;
            Ok((pred, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<f64> = per_item.iter().map(|(p, _)| *p).collect();
    let value = loss(&predictions, targets)?;
    let grads = tree_sum(per_item.into_iter().map(|(_, g)| g).collect()).expect("nonempty batch");
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((value, grads))
}

/// Exact gradients of the batch loss.
pub fn backward(params: &ModelParams, inputs: &[Matrix], targets: &[f64]) -> Result<GradientSet> {
    loss_and_gradients(params, inputs, targets).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    /// 1-based optimiser step.
    pub step: usize,
    /// Pool loss at the parameters the step's gradient was taken at.
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub step: usize,
    /// Test loss of the model's own predictions.
    pub test_loss: f64,
    /// Test loss of the last block run on the query with its implicit update.
    pub theoretical_test_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub loss_log: Vec<StepLoss>,
    pub evaluations: Vec<Evaluation>,
}

impl TrainOutcome {
    pub fn checkpoint_at(&self, step: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }
}

/// Named random streams derived from the top-level seed.
pub struct Streams {
    pub init: RngState,
    pub train_tasks: RngState,
    pub test_tasks: RngState,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            init: RngState::substream(seed, "init"),
            train_tasks: RngState::substream(seed, "train-tasks"),
            test_tasks: RngState::substream(seed, "test-tasks"),
        }
    }
}

fn evaluate(params: &ModelParams, config: &ExperimentConfig, rng: &mut RngState, step: usize) -> Result<Evaluation> {
    let mut emp = 0.0;
    let mut theo = 0.0;
    for _ in 0..config.test_repeats {
        let batch = sample_tasks(rng, config.batch, config.seq_len, config.input_dim);
        let (e, t) = test_losses(params, &batch)?;
        emp += e;
        theo += t;
    }
    let r = config.test_repeats as f64;
    Ok(Evaluation {
        step,
        test_loss: emp / r,
        theoretical_test_loss: theo / r,
    })
}

/// Trains from scratch, checkpointing and evaluating at `config.eval_steps()`.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with_progress(config, |_, _| {})
}

pub fn train_with_progress(
    config: &ExperimentConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut streams = Streams::new(config.seed);
    let mut params = ModelParams::init(&mut streams.init, &config.model_shape());
    let pool: TaskBatch = sample_tasks(&mut streams.train_tasks, config.batch, config.seq_len, config.input_dim);
    let inputs = pool.sequences();
    let targets = pool.targets();
    let mut opt = OptimizerState::new(
        &params,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let eval_steps = config.eval_steps();

    let mut outcome = TrainOutcome {
        checkpoints: Vec::new(),
        loss_log: Vec::with_capacity(config.steps),
        evaluations: Vec::new(),
    };
    let record = |params: &ModelParams, step: usize, outcome: &mut TrainOutcome, rng: &mut RngState| -> Result<()> {
        if eval_steps.contains(&step) {
            outcome.checkpoints.push(Checkpoint::new(config, step, params.clone()));
            outcome.evaluations.push(evaluate(params, config, rng, step)?);
        }
        Ok(())
    };
    // Step 0 is always checkpointed: it is the initialisation.
    if !eval_steps.contains(&0) {
        outcome.checkpoints.push(Checkpoint::new(config, 0, params.clone()));
    }
    record(&params, 0, &mut outcome, &mut streams.test_tasks)?;

    for step in 1..=config.steps {
        let (train_loss, grads) = loss_and_gradients(&params, &inputs, &targets)?;
        if !train_loss.is_finite() || train_loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                loss: train_loss,
            });
        }
        adam_step(&mut params, &grads, &mut opt)?;
        outcome.loss_log.push(StepLoss { step, train_loss });
        on_step(step, train_loss);
        record(&params, step, &mut outcome, &mut streams.test_tasks)?;
    }
    Ok(outcome)
}
