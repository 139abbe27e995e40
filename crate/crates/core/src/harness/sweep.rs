use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{Error, Result};
use crate::train::train;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub step: usize,
    pub empirical_loss: f64,
    pub theoretical_loss: f64,
}

/// A grid point whose training run failed; the sweep moves on.
#[derive(Debug)]
pub struct SweepFailure {
    pub value: usize,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

fn with_axis(base: &ExperimentConfig, axis: SweepAxis, value: usize) -> ExperimentConfig {
    let mut c = base.clone();
    match axis {
        SweepAxis::Tasks => c.batch = value,
        SweepAxis::SeqLen => c.seq_len = value,
        SweepAxis::InputDim => {
            c.input_dim = value;
            // Derived sizes follow the new width.
            c.head_dim = None;
            c.hidden = None;
        }
    }
    c
}

/// Trains one model per grid value and records test losses at every
/// evaluation step. Divergent runs are reported in `failures`; invalid
/// configurations abort the sweep.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    for &value in values {
        let cfg = with_axis(base, axis, value);
        cfg.validate()?;
        match train(&cfg) {
            Ok(out) => report.rows.extend(out.evaluations.iter().map(|e| SweepRow {
                axis,
                value,
                step: e.step,
                empirical_loss: e.test_loss,
                theoretical_loss: e.theoretical_test_loss,
            })),
            Err(error @ (Error::Divergence { .. } | Error::NonFinite(_) | Error::DegenerateAt { .. })) => {
                report.failures.push(SweepFailure { value, error })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
