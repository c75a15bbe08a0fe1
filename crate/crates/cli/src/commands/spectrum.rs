use std::path::Path;

use serde_json::json;

use primal_attention::rng;
use primal_attention::spectrum::{spectrum, SpectrumReport, RANK_THRESHOLDS};
use primal_attention::task::make_task;
use primal_attention::Matrix;

use crate::config::{SpectrumConfig, SpectrumSource};
use crate::error::CliError;
use crate::io::{load_checkpoint, write_atomic, write_report};
use crate::Outcome;

/// The matrix a spectrum source points at.
pub fn resolve(source: &SpectrumSource) -> Result<Matrix, CliError> {
    match source {
        SpectrumSource::File { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Ok(Matrix::from_csv(&text)?)
        }
        SpectrumSource::Checkpoint {
            path,
            layer,
            head,
            batch_seed,
        } => {
            let ck = load_checkpoint(path)?;
            let data = make_task(&ck.task)?;
            let pick = rng::below(&mut rng::seeded(*batch_seed), data.test.len());
            let input = &data.examples[data.test[pick]].input;
            Ok(ck.model.attention_matrix(input, *layer, *head)?)
        }
    }
}

pub fn run(cfg: &SpectrumConfig, out: &Path) -> Result<Outcome, CliError> {
    let source = cfg
        .source
        .as_ref()
        .ok_or_else(|| CliError::Usage("spectrum.source is not set".into()))?;
    let m = resolve(source)?;
    let report: SpectrumReport = spectrum(&m)?;
    write_atomic(&out.join("spectrum.csv"), report.to_csv().as_bytes())?;
    let ranks: serde_json::Map<String, serde_json::Value> = RANK_THRESHOLDS
        .iter()
        .map(|&t| (t.to_string(), report.effective_rank(t).into()))
        .collect();
    write_report(
        &out.join("spectrum.json"),
        json!({
            "command": "spectrum",
            "source": source,
            "shape": [m.rows(), m.cols()],
            "effective_rank": ranks,
            "spectrum": report,
        }),
    )?;
    let summary: Vec<String> = RANK_THRESHOLDS
        .iter()
        .map(|&t| format!("rank({t}) = {}", report.effective_rank(t)))
        .collect();
    println!("spectrum: {}x{}, {}", m.rows(), m.cols(), summary.join(", "));
    Ok(Outcome::Pass)
}
