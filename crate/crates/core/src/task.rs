//! Synthetic sequence tasks.
//!
//! * `MajorityToken`: tokens uniform over the vocabulary; the label is the
//!   class symbol (`0..classes`) that occurs most often, lowest id on ties.
//! * `CopyFirst`: the label is the first token.
//! * `LowRankRegression`: Gaussian token features `x_i ∈ ℝ^{input_dim}`; the
//!   target is `x̄ A B` with `x̄` the mean token and `A`, `B` drawn once per
//!   dataset, so the stacked targets have rank `target_rank`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::{format_f64, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum TaskKind {
    MajorityToken {
        classes: usize,
    },
    CopyFirst,
    LowRankRegression {
        target_rank: usize,
        input_dim: usize,
        output_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskSpec {
    pub task: TaskKind,
    pub seq_len: usize,
    /// Token vocabulary (ignored by regression).
    pub vocab: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task: TaskKind::MajorityToken { classes: 2 },
            seq_len: 16,
            vocab: 8,
            seed: 0,
            train_size: 2000,
            test_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Tokens(Vec<usize>),
    /// `seq_len × input_dim`.
    Features(Matrix),
}

impl Input {
    pub fn len(&self) -> usize {
        match self {
            Input::Tokens(t) => t.len(),
            Input::Features(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `n` positions.
    pub fn prefix(&self, n: usize) -> Result<Input> {
        match self {
            Input::Tokens(t) => Ok(Input::Tokens(t[..n].to_vec())),
            Input::Features(m) => Ok(Input::Features(m.select_rows(&(0..n).collect::<Vec<_>>())?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Input,
    pub target: Target,
}

/// What a model must consume and emit for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    Tokens { vocab: usize },
    Continuous { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    Classification { classes: usize },
    Regression { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "seq_len, train_size and test_size must be positive".into(),
            ));
        }
        match self.task {
            TaskKind::MajorityToken { classes } => {
                if classes < 2 || classes > self.vocab {
                    return Err(Error::Config(format!(
                        "majority task needs 2 <= classes <= vocab, got {classes} of {}",
                        self.vocab
                    )));
                }
            }
            TaskKind::CopyFirst => {
                if self.vocab < 2 {
                    return Err(Error::Config("copy-first task needs a vocabulary of at least 2".into()));
                }
            }
            TaskKind::LowRankRegression {
                target_rank,
                input_dim,
                output_dim,
            } => {
                if target_rank == 0 || target_rank > input_dim.min(output_dim) {
                    return Err(Error::Config(format!(
                        "target_rank {target_rank} must lie in 1..={}",
                        input_dim.min(output_dim)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_spec(&self) -> InputSpec {
        match self.task {
            TaskKind::LowRankRegression { input_dim, .. } => InputSpec::Continuous { dim: input_dim },
            _ => InputSpec::Tokens { vocab: self.vocab },
        }
    }

    pub fn head(&self) -> TaskHead {
        match self.task {
            TaskKind::MajorityToken { classes } => TaskHead::Classification { classes },
            TaskKind::CopyFirst => TaskHead::Classification { classes: self.vocab },
            TaskKind::LowRankRegression { output_dim, .. } => TaskHead::Regression { dim: output_dim },
        }
    }
}

/// Label of a majority-token sequence.
pub fn majority_label(tokens: &[usize], classes: usize) -> usize {
    let mut counts = alloc::vec![0usize; classes];
    for &t in tokens {
        if t < classes {
            counts[t] += 1;
        }
    }
    // max_by_key keeps the last maximum, so scan explicitly for the first.
    let mut best = 0;
    for c in 1..classes {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// Mixing matrices `(A, B)` of a low-rank regression task.
pub fn low_rank_factors(spec: &TaskSpec) -> Option<(Matrix, Matrix)> {
    match spec.task {
        TaskKind::LowRankRegression {
            target_rank,
            input_dim,
            output_dim,
        } => {
            let mut g = rng::seeded(rng::derive_seed(spec.seed, 1));
            let a = rng::normal_matrix(&mut g, input_dim, target_rank);
            let b = rng::normal_matrix(&mut g, target_rank, output_dim);
            Some((a, b))
        }
        _ => None,
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.train_size + spec.test_size;
    let mut g = rng::seeded(rng::derive_seed(spec.seed, 0));
    let factors = low_rank_factors(spec);
    let mut examples = Vec::with_capacity(total);
    for _ in 0..total {
        let ex = match spec.task {
            TaskKind::MajorityToken { classes } => {
                let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng::below(&mut g, spec.vocab)).collect();
                let label = majority_label(&tokens, classes);
                Example {
                    input: Input::Tokens(tokens),
                    target: Target::Class(label),
                }
            }
            TaskKind::CopyFirst => {
                let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng::below(&mut g, spec.vocab)).collect();
                let label = tokens[0];
                Example {
                    input: Input::Tokens(tokens),
                    target: Target::Class(label),
                }
            }
            TaskKind::LowRankRegression { input_dim, .. } => {
                let (a, b) = factors.as_ref().expect("regression factors");
                let x = rng::normal_matrix(&mut g, spec.seq_len, input_dim);
                let mean =
                    Matrix::row_vector(&x.col_sums().iter().map(|v| v / spec.seq_len as f64).collect::<Vec<_>>());
                let y = mean.matmul(a)?.matmul(b)?;
                Example {
                    input: Input::Features(x),
                    target: Target::Values(y.into_vec()),
                }
            }
        };
        examples.push(ex);
    }
    Ok(Dataset {
        spec: spec.clone(),
        examples,
        train: (0..spec.train_size).collect(),
        test: (spec.train_size..total).collect(),
    })
}

impl Dataset {
    /// One line per example: `split,index,input...,target...`. Feature
    /// inputs are flattened row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,index,input,target\n");
        for (i, ex) in self.examples.iter().enumerate() {
            let split = if i < self.spec.train_size { "train" } else { "test" };
            let _ = write!(out, "{split},{i}");
            match &ex.input {
                Input::Tokens(t) => t.iter().for_each(|v| {
                    let _ = write!(out, ",{v}");
                }),
                Input::Features(m) => m.as_slice().iter().for_each(|v| {
                    let _ = write!(out, ",{}", format_f64(*v));
                }),
            }
            match &ex.target {
                Target::Class(c) => {
                    let _ = write!(out, ",{c}");
                }
                Target::Values(v) => v.iter().for_each(|x| {
                    let _ = write!(out, ",{}", format_f64(*x));
                }),
            }
            out.push('\n');
        }
        out
    }
}
