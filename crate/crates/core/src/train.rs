//! Training loop: minibatch sampling, optimizer steps, evaluation and the
//! per-step log.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::format_f64;
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::task::{Dataset, Example, Target, TaskHead};

/// Losses above this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub log_every: u64,
    pub optimizer: OptimizerConfig,
    /// Learning-rate factor for `Λ` (its raw log-parameters).
    pub lambda_lr_multiplier: f64,
    /// Seeds minibatch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            log_every: 100,
            optimizer: OptimizerConfig::default(),
            lambda_lr_multiplier: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Mse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "eval_accuracy",
            Metric::Mse => "eval_mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub task_loss: f64,
    pub per_layer_j: Vec<f64>,
    pub penalty: f64,
    pub total: f64,
    /// Test-set metric after the update.
    pub eval: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub metric: Metric,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn header(&self, layers: usize) -> String {
        let mut h = String::from("step,task_loss");
        for l in 0..layers {
            let _ = write!(h, ",j_layer{l}");
        }
        let _ = write!(h, ",penalty,total,{}", self.metric.name());
        h
    }

    /// CSV with one row per logged step.
    pub fn to_csv(&self) -> String {
        let layers = self.rows.first().map_or(0, |r| r.per_layer_j.len());
        let mut out = self.header(layers);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&row_csv(r));
            out.push('\n');
        }
        out
    }
}

pub fn row_csv(r: &LogRow) -> String {
    let mut line = format!("{},{}", r.step, format_f64(r.task_loss));
    for j in &r.per_layer_j {
        let _ = write!(line, ",{}", format_f64(*j));
    }
    let _ = write!(
        line,
        ",{},{},{}",
        format_f64(r.penalty),
        format_f64(r.total),
        format_f64(r.eval)
    );
    line
}

/// A failed run and everything logged before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFailure {
    pub error: Error,
    pub log: TrainLog,
}

/// Model, optimizer and data of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub data: Dataset,
    pub config: TrainConfig,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Trainer {
    pub fn new(model: Model, data: Dataset, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 || config.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if data.train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let optimizer = Optimizer::new(config.optimizer, config.lambda_lr_multiplier)?;
        Ok(Trainer {
            model,
            optimizer,
            data,
            config,
        })
    }

    pub fn metric(&self) -> Metric {
        match self.model.shape.head {
            TaskHead::Classification { .. } => Metric::Accuracy,
            TaskHead::Regression { .. } => Metric::Mse,
        }
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.optimizer.state.step
    }

    /// Training indices of the minibatch for `step` (0-based), sampled
    /// without replacement from a stream derived from the run seed.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let train = &self.data.train;
        if self.config.batch_size >= train.len() {
            return train.clone();
        }
        let mut g = rng::seeded(rng::derive_seed(self.config.seed, step));
        rng::sample_indices(&mut g, train.len(), self.config.batch_size)
            .into_iter()
            .map(|i| train[i])
            .collect()
    }

    /// Accuracy or mean squared error over the test split.
    pub fn evaluate(&self) -> Result<f64> {
        let test: Vec<&Example> = self.data.test.iter().map(|&i| &self.data.examples[i]).collect();
        evaluate(&self.model, &test)
    }

    /// Runs one optimizer step and returns its log row (evaluated only when
    /// `with_eval`).
    pub fn step(&mut self, with_eval: bool) -> Result<LogRow> {
        let step = self.step_count();
        let idx = self.batch_indices(step);
        let batch: Vec<&Example> = idx.iter().map(|&i| &self.data.examples[i]).collect();
        let pass = self.model.forward_loss(&batch)?;
        if pass.total > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step: step + 1,
                loss: pass.total,
            });
        }
        let grads = pass.tape.backward(pass.loss)?;
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.model.check_params()?;
        let eval = if with_eval { self.evaluate()? } else { f64::NAN };
        Ok(LogRow {
            step: step + 1,
            task_loss: pass.task_loss,
            per_layer_j: pass.report.per_layer_j,
            penalty: pass.report.penalty,
            total: pass.total,
            eval,
        })
    }

    /// Trains until `config.steps` steps have been taken, logging every
    /// `log_every` steps and at the last one.
    pub fn run(&mut self) -> core::result::Result<TrainLog, TrainFailure> {
        self.run_with(|_| {})
    }

    /// As [`Trainer::run`], calling `on_row` for each logged row.
    pub fn run_with(&mut self, mut on_row: impl FnMut(&LogRow)) -> core::result::Result<TrainLog, TrainFailure> {
        let mut log = TrainLog {
            metric: self.metric(),
            rows: Vec::new(),
        };
        while self.step_count() < self.config.steps {
            let next = self.step_count() + 1;
            let logged = next.is_multiple_of(self.config.log_every) || next == self.config.steps;
            match self.step(logged) {
                Ok(row) => {
                    if logged {
                        on_row(&row);
                        log.rows.push(row);
                    }
                }
                Err(error) => {
                    return Err(TrainFailure { error, log });
                }
            }
        }
        Ok(log)
    }
}

/// Accuracy (classification) or mean squared error (regression) of `model`
/// on `examples`.
pub fn evaluate(model: &Model, examples: &[&Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut acc = 0.0;
    for ex in examples {
        let out = model.predict(&ex.input)?;
        acc += match &ex.target {
            Target::Class(c) => f64::from(u8::from(argmax(&out) == *c)),
            Target::Values(v) => out.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64,
        };
    }
    Ok(acc / examples.len() as f64)
}

/// Builds a trainer and runs it to completion.
pub fn train(
    model: Model,
    data: Dataset,
    config: TrainConfig,
) -> core::result::Result<(Model, TrainLog), TrainFailure> {
    let mut trainer = Trainer::new(model, data, config).map_err(|error| TrainFailure {
        error,
        log: TrainLog {
            metric: Metric::Accuracy,
            rows: Vec::new(),
        },
    })?;
    let log = trainer.run()?;
    Ok((trainer.model, log))
}
