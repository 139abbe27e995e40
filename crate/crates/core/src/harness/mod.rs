//! Experiment harness: equivalence checks, alignment matrices, sweeps and
//! the CSV artifacts they produce.

pub mod report;
mod sweep;

pub use sweep::{sweep, SweepFailure, SweepReport, SweepRow};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::implicit::{extract_update, extract_updates, update_rank, ImplicitUpdate};
use crate::model::query_only_block_forward;
use crate::model::checkpoint::Checkpoint;
use crate::model::{BlockVariant, ModelParams, ModelTrace};
use crate::taskgen::{sample_tasks, TaskBatch};
use crate::tensor::{norm, Matrix, RngState};

/// Fresh tasks for verification and alignment, from their own stream.
pub fn verification_tasks(config: &ExperimentConfig) -> TaskBatch {
    let mut rng = RngState::substream(config.seed, "verify-tasks");
    sample_tasks(&mut rng, config.batch, config.seq_len, config.input_dim)
}

fn locate(task: usize, block: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::DegenerateQuery { .. } => Error::DegenerateAt {
            task,
            block,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Empirical and theoretical test losses over a batch.
///
/// The theoretical prediction runs the last block on its query input alone,
/// with the implicit update of the last token.
pub fn test_losses(params: &ModelParams, batch: &TaskBatch) -> Result<(f64, f64)> {
    let last = params.blocks.len() - 1;
    let preds: Vec<(f64, f64)> = batch
        .tasks
        .par_iter()
        .enumerate()
        .map(|(b, task)| {
            let trace = params.forward_traced(&task.build_sequence())?;
            let block = &trace.blocks[last];
            let n = block.tokens();
            let u = extract_update(block, &params.blocks[last], last, n - 1).map_err(locate(b, last))?;
            let out = query_only_block_forward(
                &params.blocks[last],
                params.variant,
                &block.query_input(),
                &u.delta_w,
                &u.delta_b,
            )?;
            Ok((trace.prediction, out[params.readout]))
        })
        .collect::<Result<_>>()?;
    let targets = batch.targets();
    let emp: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let theo: Vec<f64> = preds.iter().map(|p| p.1).collect();
    Ok((crate::train::loss(&emp, &targets)?, crate::train::loss(&theo, &targets)?))
}

/// Sum over tokens of `‖T(C, x)_i − T_{W+ΔW_i, b'+Δb'_i}(x_ℓ)‖²`, per block.
fn squared_deviation(params: &ModelParams, trace: &ModelTrace, task: usize) -> Result<Vec<f64>> {
    trace
        .blocks
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let block = &params.blocks[l];
            let x = t.query_input();
            let updates = extract_updates(t, block, l).map_err(locate(task, l))?;
            let mut sum = 0.0;
            for u in &updates {
                let rhs = query_only_block_forward(block, params.variant, &x, &u.delta_w, &u.delta_b)?;
                let lhs = t.context.output.col(u.token);
                sum += lhs.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            Ok(sum)
        })
        .collect()
}

/// Mean squared deviation per block (0-based index) over a batch of sequences.
pub fn msd_per_block(params: &ModelParams, inputs: &[Matrix]) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::dims("verify", "at least one sequence", "none"));
    }
    let per_task: Vec<Vec<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(b, x)| {
            let trace = params.forward_traced(x)?;
            squared_deviation(params, &trace, b)
        })
        .collect::<Result<_>>()?;
    let (d, n) = inputs[0].shape();
    let denom = (inputs.len() * n * d) as f64;
    let mut msd = vec![0.0; params.blocks.len()];
    for row in &per_task {
        for (m, v) in msd.iter_mut().zip(row) {
            *m += v;
        }
    }
    Ok(msd.into_iter().map(|s| s / denom).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsdReport {
    pub seed: u64,
    pub variant: BlockVariant,
    pub step: usize,
    /// Indexed by 0-based block.
    pub msd: Vec<f64>,
}

impl MsdReport {
    pub fn max(&self) -> f64 {
        self.msd.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// Checks the equivalence on a checkpoint, whose variant must match `variant`.
pub fn verify_equivalence(checkpoint: &Checkpoint, variant: BlockVariant, batch: &TaskBatch) -> Result<MsdReport> {
    if checkpoint.params.variant != variant {
        return Err(Error::InvalidCheckpoint {
            path: Default::default(),
            reason: format!(
                "checkpoint holds a {} model, {} was requested",
                checkpoint.params.variant, variant
            ),
        });
    }
    let msd = msd_per_block(&checkpoint.params, &batch.sequences())?;
    Ok(MsdReport {
        seed: checkpoint.seed,
        variant,
        step: checkpoint.step,
        msd,
    })
}

/// `⟨U, V⟩_F / (‖U‖_F ‖V‖_F)`.
pub fn directional_alignment(u: &Matrix, v: &Matrix) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::dims("directional_alignment", format!("{:?}", u.shape()), format!("{:?}", v.shape())));
    }
    let (nu, nv) = (u.frobenius_norm(), v.frobenius_norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(u.frobenius_dot(v)? / (nu * nv))
}

/// Square matrix of alignments; `None` where either update vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub values: Vec<Vec<Option<f64>>>,
}

impl AlignmentMatrix {
    pub fn from_updates(updates: &[&Matrix]) -> Self {
        let values = updates
            .iter()
            .map(|u| {
                updates
                    .iter()
                    .map(|v| directional_alignment(u, v).ok())
                    .collect()
            })
            .collect();
        AlignmentMatrix { values }
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }
}

/// Token-by-token alignment of the weight updates, one matrix per block.
pub fn token_alignment(params: &ModelParams, seq: &Matrix, task: usize) -> Result<Vec<AlignmentMatrix>> {
    let trace = params.forward_traced(seq)?;
    trace
        .blocks
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let updates = extract_updates(t, &params.blocks[l], l).map_err(locate(task, l))?;
            let ws: Vec<&Matrix> = updates.iter().map(|u| &u.delta_w).collect();
            Ok(AlignmentMatrix::from_updates(&ws))
        })
        .collect()
}

/// Block-by-block alignment of the last-token weight updates.
pub fn block_alignment(params: &ModelParams, seq: &Matrix, task: usize) -> Result<AlignmentMatrix> {
    let updates = last_token_updates(params, seq, task)?;
    let ws: Vec<&Matrix> = updates.iter().map(|u| &u.delta_w).collect();
    Ok(AlignmentMatrix::from_updates(&ws))
}

fn last_token_updates(params: &ModelParams, seq: &Matrix, task: usize) -> Result<Vec<ImplicitUpdate>> {
    let trace = params.forward_traced(seq)?;
    trace
        .blocks
        .iter()
        .enumerate()
        .map(|(l, t)| extract_update(t, &params.blocks[l], l, t.tokens() - 1).map_err(locate(task, l)))
        .collect()
}

/// Rank diagnostics of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSummary {
    pub block: usize,
    pub token: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub ratio: f64,
    pub delta_b_norm: f64,
}

/// Rank diagnostics of every token update of every block of one sequence.
pub fn update_summaries(params: &ModelParams, seq: &Matrix, task: usize) -> Result<Vec<UpdateSummary>> {
    let trace = params.forward_traced(seq)?;
    let mut out = Vec::new();
    for (l, t) in trace.blocks.iter().enumerate() {
        for u in extract_updates(t, &params.blocks[l], l).map_err(locate(task, l))? {
            let r = update_rank(&u.delta_w)?;
            out.push(UpdateSummary {
                block: l,
                token: u.token,
                sigma1: r.sigma1,
                sigma2: r.sigma2,
                ratio: r.ratio,
                delta_b_norm: norm(&u.delta_b),
            });
        }
    }
    Ok(out)
}
