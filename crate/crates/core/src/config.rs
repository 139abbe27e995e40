//! Experiment configuration: a versioned TOML document.
//!
//! Every key is optional except `version`; missing keys fall back to the
//! defaults of [`ExperimentConfig::default`]. Unknown keys are rejected.
//!
//! ```toml
//! version = 1
//! seed = 0
//! variant = "skip"          # plain | dherin-skip | skip | pre-ln
//! blocks = 5
//! input_dim = 2
//! seq_len = 51
//! batch = 128
//! heads = 3
//! head_dim = 1              # default: ceil((input_dim + 1) / heads)
//! hidden = 12               # default: 4 * (input_dim + 1)
//! steps = 100
//! learning_rate = 0.05
//! beta1 = 0.9
//! beta2 = 0.999
//! adam_eps = 1e-8
//! eval_steps = [0, 25, 50, 75, 100]   # default: quarters of `steps`
//! test_repeats = 1
//! ln_eps = 1e-5
//! positional = false
//! output_dir = "runs"
//! sweep_axis = "tasks"      # tasks | seq-len | input-dim
//! sweep_values = [8, 32, 128, 512]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BlockVariant, ModelShape};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Tasks,
    SeqLen,
    InputDim,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tasks => "tasks",
            SweepAxis::SeqLen => "seq-len",
            SweepAxis::InputDim => "input-dim",
        }
    }

    pub fn default_grid(self) -> Vec<usize> {
        match self {
            SweepAxis::Tasks => vec![8, 32, 128, 512],
            SweepAxis::SeqLen => vec![11, 26, 51, 101],
            SweepAxis::InputDim => vec![1, 2, 4, 8],
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tasks" => Ok(SweepAxis::Tasks),
            "seq-len" => Ok(SweepAxis::SeqLen),
            "input-dim" => Ok(SweepAxis::InputDim),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis {other:?} (expected tasks, seq-len or input-dim)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub version: Option<u32>,
    pub seed: u64,
    pub variant: BlockVariant,
    pub blocks: usize,
    pub input_dim: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_steps: Option<Vec<usize>>,
    pub test_repeats: usize,
    pub ln_eps: f64,
    pub positional: bool,
    pub output_dir: PathBuf,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: Some(CONFIG_VERSION),
            seed: 0,
            variant: BlockVariant::Skip,
            blocks: 5,
            input_dim: 2,
            seq_len: 51,
            batch: 128,
            heads: 3,
            head_dim: None,
            hidden: None,
            steps: 100,
            learning_rate: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_steps: None,
            test_repeats: 1,
            ln_eps: 1e-5,
            positional: false,
            output_dir: PathBuf::from("runs"),
            sweep_axis: SweepAxis::Tasks,
            sweep_values: None,
        }
    }
}

impl ExperimentConfig {
    /// Model width `d = d_x + 1`.
    pub fn width(&self) -> usize {
        self.input_dim + 1
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or_else(|| self.width().div_ceil(self.heads.max(1)))
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(4 * self.width())
    }

    /// Requested evaluation steps, sorted and deduplicated.
    pub fn eval_steps(&self) -> Vec<usize> {
        let mut steps = match &self.eval_steps {
            Some(s) => s.clone(),
            None => (0..=4).map(|k| k * self.steps / 4).collect(),
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    pub fn sweep_values(&self) -> Vec<usize> {
        self.sweep_values.clone().unwrap_or_else(|| self.sweep_axis.default_grid())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            variant: self.variant,
            blocks: self.blocks,
            width: self.width(),
            heads: self.heads,
            head_dim: self.head_dim(),
            hidden: self.hidden(),
            ln_eps: self.ln_eps,
            positions: self.positional.then_some(self.seq_len),
        }
    }

    /// Copy with every derived default written out explicitly.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.version = Some(c.version.unwrap_or(CONFIG_VERSION));
        c.head_dim = Some(self.head_dim());
        c.hidden = Some(self.hidden());
        c.eval_steps = Some(self.eval_steps());
        c.sweep_values = Some(self.sweep_values());
        c
    }

    pub fn validate(&self) -> Result<()> {
        match self.version {
            None => return Err(Error::InvalidConfig("missing required key `version`".into())),
            Some(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(Error::InvalidConfig(format!(
                    "unsupported `version` {v} (expected {CONFIG_VERSION})"
                )))
            }
        }
        let counts = [
            ("blocks", self.blocks),
            ("input_dim", self.input_dim),
            ("seq_len", self.seq_len),
            ("batch", self.batch),
            ("heads", self.heads),
            ("head_dim", self.head_dim()),
            ("hidden", self.hidden()),
            ("test_repeats", self.test_repeats),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("`{key}` must be >= 1")));
            }
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("ln_eps", self.ln_eps),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("`{key}` must be > 0, got {v}")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("`{key}` must lie in [0, 1), got {v}")));
            }
        }
        if let Some(&s) = self.eval_steps().iter().find(|&&s| s > self.steps) {
            return Err(Error::InvalidConfig(format!(
                "`eval_steps` entry {s} exceeds `steps` = {}",
                self.steps
            )));
        }
        let values = self.sweep_values();
        if values.is_empty() || values.contains(&0) {
            return Err(Error::InvalidConfig("`sweep_values` must be nonempty and >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.resolved()).expect("config serialises to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form. The
    /// output directory is where a run lives, not what it is, so it is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, config.to_toml()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.batch, c.seq_len, c.input_dim, c.blocks, c.heads, c.steps), (128, 51, 2, 5, 3, 100));
        assert_eq!(c.learning_rate, 5e-2);
        assert_eq!(c.head_dim(), 1);
        assert_eq!(c.hidden(), 12);
        assert_eq!(c.eval_steps(), vec![0, 25, 50, 75, 100]);
        c.validate().unwrap();
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let mut c = ExperimentConfig::default();
        c.variant = BlockVariant::PreLn;
        c.seed = 42;
        c.learning_rate = 0.123_456_789_012_345_67;
        save_config(&c, &path).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, c.resolved());
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn missing_version_is_named() {
        let err = ExperimentConfig::from_toml("seed = 3\n").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = ExperimentConfig::from_toml("version = 1\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn zero_learning_rate_is_invalid() {
        let err = ExperimentConfig::from_toml("version = 1\nlearning_rate = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ExperimentConfig::from_toml("version = 1\nseed = \"x\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") || msg.contains("2:"), "{msg}");
    }

    #[test]
    fn partial_file_falls_back_to_defaults() {
        let c = ExperimentConfig::from_toml("version = 1\nsteps = 8\n").unwrap();
        assert_eq!(c.batch, 128);
        assert_eq!(c.eval_steps(), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = a.clone();
        c.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }
}
