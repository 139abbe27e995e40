//! `icl-lab`: train contextual blocks on in-context regression and check that
//! the context acts as a rank-1 update of the MLP.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration, 4 missing input, 5 invalid checkpoint, 6 gradient check
//! failed, 7 training diverged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icl_core::config::{load_config, ExperimentConfig, SweepAxis};
use icl_core::gradcheck::tiny_gradient_check;
use icl_core::harness::report::{self, CsvTable, Provenance};
use icl_core::harness::{self, verification_tasks};
use icl_core::model::checkpoint::Checkpoint;
use icl_core::model::BlockVariant;
use icl_core::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_MISSING: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_GRADCHECK: u8 = 6;
const EXIT_DIVERGED: u8 = 7;

const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "Contextual blocks as implicit rank-1 MLP updates")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file, which
/// overrides the built-in defaults.
#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Block variant: plain, dherin-skip, skip or pre-ln.
    #[arg(long, global = true)]
    variant: Option<BlockVariant>,
    /// Number of blocks L.
    #[arg(long, global = true)]
    blocks: Option<usize>,
    /// Number of tasks B.
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Sequence length N.
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    /// Input dimension d_x.
    #[arg(long, global = true)]
    input_dim: Option<usize>,
    /// Optimiser steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "ICL_LAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints, loss.csv and eval.csv.
    Train,
    /// Check the context/implicit-update equivalence; writes msd.csv and updates.csv.
    Verify(CheckpointArgs),
    /// Directional alignment of updates; writes align_tokens.csv and align_blocks.csv.
    Align(CheckpointArgs),
    /// Train across a grid of one axis; writes sweep.csv.
    Sweep {
        /// tasks, seq-len or input-dim.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck,
    /// Print the resolved configuration.
    DumpConfig,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file; repeatable. Default: every checkpoint under <out>/checkpoints.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Index of the task whose updates are dumped or aligned.
    #[arg(long, default_value_t = 0)]
    task: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => EXIT_CONFIG,
        Error::MissingInput(_) => EXIT_MISSING,
        Error::InvalidCheckpoint { .. } => EXIT_CHECKPOINT,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_RUNTIME,
    }
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(v) = c.blocks {
        cfg.blocks = v;
    }
    if let Some(v) = c.batch {
        cfg.batch = v;
    }
    if let Some(v) = c.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = c.input_dim {
        cfg.input_dim = v;
        cfg.head_dim = None;
        cfg.hidden = None;
    }
    if let Some(v) = c.steps {
        cfg.steps = v;
        if cfg.eval_steps.as_ref().is_some_and(|s| s.iter().any(|&t| t > v)) {
            cfg.eval_steps = None;
        }
    }
    if let Some(v) = &c.out {
        cfg.output_dir = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

fn run_train(cfg: &ExperimentConfig) -> Result<(), Error> {
    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let outcome = icl_core::train::train_with_progress(cfg, |step, loss| {
        if step % 10 == 0 || step == cfg.steps {
            eprintln!("step {step:>5}  train loss {loss:.6e}");
        }
    })?;
    icl_core::config::save_config(cfg, &out.join("config.toml"))?;
    for c in &outcome.checkpoints {
        c.save(&ckpt_dir.join(format!("step-{:06}.json", c.step)))?;
    }
    let prov = provenance(cfg);
    report::loss_table(prov.clone(), cfg.variant, &outcome).write(&out.join("loss.csv"))?;
    report::eval_table(prov, cfg.variant, &outcome).write(&out.join("eval.csv"))?;
    if let Some(e) = outcome.evaluations.last() {
        println!(
            "step {}: test loss {:.6e} (theoretical {:.6e})",
            e.step, e.test_loss, e.theoretical_test_loss
        );
    }
    Ok(())
}

/// Loads every requested checkpoint before anything is written.
fn load_checkpoints(
    cfg: &ExperimentConfig,
    requested: Option<BlockVariant>,
    args: &CheckpointArgs,
) -> Result<Vec<Checkpoint>, Error> {
    let paths = if args.checkpoint.is_empty() {
        let dir = cfg.output_dir.join("checkpoints");
        let entries = std::fs::read_dir(&dir).map_err(|_| Error::MissingInput(dir.clone()))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        if paths.is_empty() {
            return Err(Error::MissingInput(dir));
        }
        paths.sort();
        paths
    } else {
        args.checkpoint.clone()
    };
    let mut ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>, _>>()?;
    ckpts.sort_by_key(|c| c.step);
    if let Some(v) = requested {
        if let Some(c) = ckpts.iter().find(|c| c.params.variant != v) {
            return Err(Error::InvalidConfig(format!(
                "checkpoint at step {} holds a {} model but variant {v} was requested",
                c.step, c.params.variant
            )));
        }
    }
    if let Some(c) = ckpts.iter().find(|c| args.task >= c.config.batch) {
        return Err(Error::InvalidConfig(format!(
            "task index {} out of range for batch {}",
            args.task, c.config.batch
        )));
    }
    Ok(ckpts)
}

fn checkpoint_provenance(c: &Checkpoint) -> Provenance {
    Provenance {
        seed: c.seed,
        config_hash: c.config_hash.clone(),
    }
}

fn run_verify(cfg: &ExperimentConfig, requested: Option<BlockVariant>, args: &CheckpointArgs) -> Result<(), Error> {
    let ckpts = load_checkpoints(cfg, requested, args)?;
    let prov = checkpoint_provenance(&ckpts[0]);
    let mut reports = Vec::new();
    let mut updates = CsvTable::new(prov.clone(), report::UPDATES_HEADER);
    for c in &ckpts {
        let batch = verification_tasks(&c.config);
        let r = harness::verify_equivalence(c, c.params.variant, &batch)?;
        println!("step {:>5}: max MSD over blocks {:.3e}", r.step, r.max());
        reports.push(r);
        let seq = batch.tasks[args.task].build_sequence();
        let summaries = harness::update_summaries(&c.params, &seq, args.task)?;
        report::push_updates(&mut updates, c.step, c.params.variant, &summaries);
    }
    create_dir(&cfg.output_dir)?;
    report::msd_table(prov, &reports).write(&cfg.output_dir.join("msd.csv"))?;
    updates.write(&cfg.output_dir.join("updates.csv"))
}

fn run_align(cfg: &ExperimentConfig, requested: Option<BlockVariant>, args: &CheckpointArgs) -> Result<(), Error> {
    let ckpts = load_checkpoints(cfg, requested, args)?;
    let prov = checkpoint_provenance(&ckpts[0]);
    let mut tokens = CsvTable::new(prov.clone(), report::ALIGN_TOKENS_HEADER);
    let mut blocks = CsvTable::new(prov, report::ALIGN_BLOCKS_HEADER);
    for c in &ckpts {
        let batch = verification_tasks(&c.config);
        let seq = batch.tasks[args.task].build_sequence();
        let per_block = harness::token_alignment(&c.params, &seq, args.task)?;
        report::push_token_alignment(&mut tokens, c.step, args.task, &per_block);
        let m = harness::block_alignment(&c.params, &seq, args.task)?;
        report::push_block_alignment(&mut blocks, c.step, args.task, &m);
    }
    create_dir(&cfg.output_dir)?;
    tokens.write(&cfg.output_dir.join("align_tokens.csv"))?;
    blocks.write(&cfg.output_dir.join("align_blocks.csv"))
}

fn run_sweep(cfg: &ExperimentConfig, axis: Option<SweepAxis>, values: Option<Vec<usize>>) -> Result<(), Error> {
    let mut cfg = cfg.clone();
    if let Some(a) = axis {
        if a != cfg.sweep_axis {
            cfg.sweep_values = None;
        }
        cfg.sweep_axis = a;
    }
    if values.is_some() {
        cfg.sweep_values = values;
    }
    cfg.validate()?;
    let result = harness::sweep(&cfg, cfg.sweep_axis, &cfg.sweep_values())?;
    for f in &result.failures {
        eprintln!("{} = {}: {}", cfg.sweep_axis.name(), f.value, f.error);
    }
    create_dir(&cfg.output_dir)?;
    report::sweep_table(provenance(&cfg), &result.rows).write(&cfg.output_dir.join("sweep.csv"))
}

fn run_gradcheck(variant: Option<BlockVariant>, seed: u64) -> Result<bool, Error> {
    let variants = match variant {
        Some(v) => vec![v],
        None => BlockVariant::ALL.to_vec(),
    };
    let mut ok = true;
    for v in variants {
        let r = tiny_gradient_check(v, seed)?;
        let worst = r.max_rel_error();
        let pass = worst <= GRADCHECK_TOLERANCE;
        ok &= pass;
        let at = r.worst().map(|c| format!(" at {}[{}]", c.tensor, c.index)).unwrap_or_default();
        println!(
            "{} {v:<12} max relative error {worst:.3e}{at}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("`--threads`: {e}")))?;
    }
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Train => run_train(&cfg)?,
        Command::Verify(args) => run_verify(&cfg, cli.common.variant, &args)?,
        Command::Align(args) => run_align(&cfg, cli.common.variant, &args)?,
        Command::Sweep { axis, values } => run_sweep(&cfg, axis, values)?,
        Command::Gradcheck => {
            if !run_gradcheck(cli.common.variant, cfg.seed)? {
                return Ok(ExitCode::from(EXIT_GRADCHECK));
            }
        }
        Command::DumpConfig => print!("{}", cfg.to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
