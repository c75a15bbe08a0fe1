//! The run configuration: one JSON document with every default filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use primal_attention::model::ModelConfig;
use primal_attention::task::TaskSpec;
use primal_attention::train::TrainConfig;

use crate::error::CliError;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    /// When set, replaces the model, training, verification and benchmark
    /// seeds. The dataset seed stays under `task.seed`.
    pub seed: Option<u64>,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    /// One training run per entry, each overriding `model.eta`. Empty means
    /// a single run.
    pub etas: Vec<f64>,
    /// Checkpoint directory to continue training from.
    pub resume: Option<PathBuf>,
    pub verify: VerifyConfig,
    pub spectrum: SpectrumConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: SCHEMA,
            seed: None,
            out: None,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            etas: Vec::new(),
            resume: None,
            verify: VerifyConfig::default(),
            spectrum: SpectrumConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub cases: usize,
    /// Sequence lengths cycled through by the grid.
    pub ns: Vec<usize>,
    pub d: usize,
    pub s: usize,
    pub seed: u64,
    /// Perturb every solution before checking it.
    pub corrupt: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            cases: 200,
            ns: vec![4, 6, 8, 12, 16],
            d: 6,
            s: 3,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSource {
    /// A matrix in CSV form.
    File { path: PathBuf },
    /// A head of a trained model, evaluated on one test sequence chosen by
    /// `batch_seed`.
    Checkpoint {
        path: PathBuf,
        layer: usize,
        head: usize,
        #[serde(default)]
        batch_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub source: Option<SpectrumSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Sequence lengths, ascending.
    pub ns: Vec<usize>,
    pub d: usize,
    pub s: usize,
    pub d_v: usize,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ns: vec![256, 512, 1024, 2048],
            d: 32,
            s: 16,
            d_v: 32,
            heads: 1,
            repeats: 20,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if cfg.schema != SCHEMA {
            return Err(CliError::Usage(format!(
                "config schema {} is not supported (expected {SCHEMA})",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    /// Pushes the top-level seed into every component that takes one.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.verify.seed = s;
            self.bench.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.task.validate()?;
        if self.train.batch_size == 0 || self.train.log_every == 0 {
            return Err(CliError::Usage(
                "train.batch_size and train.log_every must be positive".into(),
            ));
        }
        self.train.optimizer.validate()?;
        if self.etas.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(CliError::Usage("every eta must be finite and nonnegative".into()));
        }
        let v = &self.verify;
        if v.ns.is_empty() || v.ns.contains(&0) || v.d == 0 || v.s == 0 {
            return Err(CliError::Usage("verify needs positive ns, d and s".into()));
        }
        let b = &self.bench;
        if b.ns.is_empty() || b.ns.windows(2).any(|w| w[0] >= w[1]) || b.ns[0] == 0 {
            return Err(CliError::Usage(
                "bench.ns must be positive and strictly ascending".into(),
            ));
        }
        if b.d == 0 || b.s == 0 || b.d_v == 0 || b.heads == 0 || b.repeats == 0 {
            return Err(CliError::Usage("bench sizes and repeats must be positive".into()));
        }
        Ok(())
    }
}
