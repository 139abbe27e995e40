//! CSV artifacts.
//!
//! Each file starts with one provenance comment line,
//!
//! ```text
//! # icl-lab 0.1.0 seed=<seed> config_hash=<hash>
//! ```
//!
//! followed by a header row and data rows. Floats use `.` as the decimal
//! separator and 17 significant digits. Empty cells mark missing values.
//! Files are written to a temporary sibling and renamed into place, so a
//! failed run never leaves a partial CSV behind.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{AlignmentMatrix, MsdReport, SweepRow, UpdateSummary};
use crate::model::BlockVariant;
use crate::train::TrainOutcome;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const LOSS_HEADER: &[&str] = &["step", "train_loss", "test_loss", "seed", "variant"];
pub const EVAL_HEADER: &[&str] = &["step", "empirical_loss", "theoretical_loss", "seed", "variant"];
pub const MSD_HEADER: &[&str] = &["seed", "variant", "step", "block", "msd"];
pub const ALIGN_TOKENS_HEADER: &[&str] = &["seed", "step", "block", "task", "i", "j", "da"];
pub const ALIGN_BLOCKS_HEADER: &[&str] = &["seed", "step", "task", "l", "k", "da"];
pub const SWEEP_HEADER: &[&str] = &["axis", "value", "step", "empirical_loss", "theoretical_loss"];
pub const UPDATES_HEADER: &[&str] = &[
    "seed", "step", "variant", "block", "token", "sigma1", "sigma2", "ratio", "delta_b_norm",
];

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct CsvTable {
    pub provenance: Provenance,
    pub header: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(provenance: Provenance, header: &'static [&'static str]) -> Self {
        CsvTable {
            provenance,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# icl-lab {VERSION} seed={} config_hash={}",
            self.provenance.seed, self.provenance.config_hash
        );
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `loss.csv`: one row per optimiser step plus step 0. `train_loss` in row
/// `t` is the pool loss the `t`-th update was computed from; `test_loss` is
/// measured after the update and is empty between evaluation steps.
pub fn loss_table(prov: Provenance, variant: BlockVariant, outcome: &TrainOutcome) -> CsvTable {
    let mut t = CsvTable::new(prov.clone(), LOSS_HEADER);
    let test = |step: usize| fmt_opt(outcome.evaluations.iter().find(|e| e.step == step).map(|e| e.test_loss));
    t.push(vec!["0".into(), String::new(), test(0), prov.seed.to_string(), variant.to_string()]);
    for s in &outcome.loss_log {
        t.push(vec![
            s.step.to_string(),
            fmt_f64(s.train_loss),
            test(s.step),
            prov.seed.to_string(),
            variant.to_string(),
        ]);
    }
    t
}

/// `eval.csv`: empirical and theoretical test losses at evaluation steps.
pub fn eval_table(prov: Provenance, variant: BlockVariant, outcome: &TrainOutcome) -> CsvTable {
    let mut t = CsvTable::new(prov.clone(), EVAL_HEADER);
    for e in &outcome.evaluations {
        t.push(vec![
            e.step.to_string(),
            fmt_f64(e.test_loss),
            fmt_f64(e.theoretical_test_loss),
            prov.seed.to_string(),
            variant.to_string(),
        ]);
    }
    t
}

/// `msd.csv`, blocks 1-based.
pub fn msd_table(prov: Provenance, reports: &[MsdReport]) -> CsvTable {
    let mut t = CsvTable::new(prov, MSD_HEADER);
    for r in reports {
        for (l, m) in r.msd.iter().enumerate() {
            t.push(vec![
                r.seed.to_string(),
                r.variant.to_string(),
                r.step.to_string(),
                (l + 1).to_string(),
                fmt_f64(*m),
            ]);
        }
    }
    t
}

/// Rows of `align_tokens.csv` for one (step, task); blocks and tokens 1-based.
pub fn push_token_alignment(t: &mut CsvTable, step: usize, task: usize, per_block: &[AlignmentMatrix]) {
    let seed = t.provenance.seed.to_string();
    for (l, m) in per_block.iter().enumerate() {
        for i in 0..m.size() {
            for j in 0..m.size() {
                t.push(vec![
                    seed.clone(),
                    step.to_string(),
                    (l + 1).to_string(),
                    task.to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    fmt_opt(m.get(i, j)),
                ]);
            }
        }
    }
}

/// Rows of `align_blocks.csv` for one (step, task); blocks 1-based.
pub fn push_block_alignment(t: &mut CsvTable, step: usize, task: usize, m: &AlignmentMatrix) {
    let seed = t.provenance.seed.to_string();
    for l in 0..m.size() {
        for k in 0..m.size() {
            t.push(vec![
                seed.clone(),
                step.to_string(),
                task.to_string(),
                (l + 1).to_string(),
                (k + 1).to_string(),
                fmt_opt(m.get(l, k)),
            ]);
        }
    }
}

pub fn sweep_table(prov: Provenance, rows: &[SweepRow]) -> CsvTable {
    let mut t = CsvTable::new(prov, SWEEP_HEADER);
    for r in rows {
        t.push(vec![
            r.axis.name().to_string(),
            r.value.to_string(),
            r.step.to_string(),
            fmt_f64(r.empirical_loss),
            fmt_f64(r.theoretical_loss),
        ]);
    }
    t
}

/// Rows of `updates.csv` for one checkpoint; blocks and tokens 1-based.
pub fn push_updates(t: &mut CsvTable, step: usize, variant: BlockVariant, summaries: &[UpdateSummary]) {
    let seed = t.provenance.seed.to_string();
    for s in summaries {
        t.push(vec![
            seed.clone(),
            step.to_string(),
            variant.to_string(),
            (s.block + 1).to_string(),
            (s.token + 1).to_string(),
            fmt_f64(s.sigma1),
            fmt_f64(s.sigma2),
            fmt_f64(s.ratio),
            fmt_f64(s.delta_b_norm),
        ]);
    }
}

/// Parses a CSV written by [`CsvTable`] into its header and rows.
pub fn read_table(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .map(|h| h.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}
