use std::path::{Path, PathBuf};

use serde_json::json;

use primal_attention::model::{Model, ModelShape};
use primal_attention::task::{make_task, Dataset};
use primal_attention::train::{row_csv, TrainLog, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{create_dir, load_checkpoint, save_checkpoint, write_atomic, write_report};
use crate::Outcome;

/// Result of one training run inside a `train` command.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub eta: f64,
    pub log: TrainLog,
    pub error: Option<String>,
}

fn eta_dir(out: &Path, eta: f64) -> PathBuf {
    out.join(format!("eta_{eta}"))
}

fn run_one(cfg: &RunConfig, eta: f64, data: &Dataset, dir: &Path) -> Result<RunResult, CliError> {
    create_dir(dir)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.eta = eta;
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.task != cfg.task {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint was trained on a different task",
                    path.display()
                )));
            }
            if ck.model.config != model_cfg {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint model differs from the config",
                    path.display()
                )));
            }
            let mut t = Trainer::new(ck.model, data.clone(), cfg.train.clone())?;
            t.optimizer.state = ck.optimizer;
            t
        }
        None => {
            let model = Model::new(model_cfg, ModelShape::for_task(&cfg.task))?;
            Trainer::new(model, data.clone(), cfg.train.clone())?
        }
    };
    let label = dir.display().to_string();
    let result = trainer.run_with(|row| println!("{label}: {}", row_csv(row)));
    let (log, error) = match result {
        Ok(log) => (log, None),
        Err(f) => (f.log, Some(f.error.to_string())),
    };
    let layers = trainer.model.primal_layers().len();
    let mut csv = log.header(layers);
    csv.push('\n');
    for r in &log.rows {
        csv.push_str(&row_csv(r));
        csv.push('\n');
    }
    write_atomic(&dir.join("train_log.csv"), csv.as_bytes())?;
    save_checkpoint(
        &dir.join("checkpoint"),
        &trainer.model,
        &cfg.task,
        &trainer.optimizer.state,
    )?;
    let last = log.rows.last();
    write_report(
        &dir.join("train_report.json"),
        json!({
            "command": "train",
            "eta": eta,
            "steps_completed": trainer.step_count(),
            "status": if error.is_some() { "diverged" } else { "completed" },
            "error": error,
            "final_task_loss": last.map(|r| r.task_loss),
            "final_per_layer_j": last.map(|r| r.per_layer_j.clone()),
            "final_eval": last.map(|r| r.eval),
            "metric": log.metric.name(),
        }),
    )?;
    Ok(RunResult {
        dir: dir.to_path_buf(),
        eta,
        log,
        error,
    })
}

/// Trains once, or once per entry of `etas`, and returns every run.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<Vec<RunResult>, CliError> {
    if cfg.resume.is_some() && !cfg.etas.is_empty() {
        return Err(CliError::Usage(
            "resume applies to a single run, not an eta sweep".into(),
        ));
    }
    let data = make_task(&cfg.task)?;
    write_atomic(&out.join("dataset.csv"), data.to_csv().as_bytes())?;
    if cfg.etas.is_empty() {
        Ok(vec![run_one(cfg, cfg.model.eta, &data, out)?])
    } else {
        cfg.etas
            .iter()
            .map(|&eta| run_one(cfg, eta, &data, &eta_dir(out, eta)))
            .collect()
    }
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let runs = run_all(cfg, out)?;
    let mut outcome = Outcome::Pass;
    for r in &runs {
        if let Some(e) = &r.error {
            eprintln!("{}: {e}", r.dir.display());
            outcome = Outcome::Fail;
        }
    }
    Ok(outcome)
}
