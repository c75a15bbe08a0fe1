use std::path::Path;

use serde_json::json;

use primal_attention::attention::ProjectionMode;
use primal_attention::dual::{verification_grid, verify_suite_with, VerificationReport, VerifyOptions};
use primal_attention::rng::derive_seed;

use crate::config::VerifyConfig;
use crate::error::CliError;
use crate::io::write_report;
use crate::Outcome;

/// One grid case and its checks, or the error that stopped it.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub index: usize,
    pub mode: &'static str,
    pub feature_map: String,
    pub report: Result<VerificationReport, String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.passed())
    }
}

pub fn run_grid(cfg: &VerifyConfig) -> Result<Vec<CaseResult>, CliError> {
    let cases = verification_grid(cfg.seed, cfg.cases, &cfg.ns, cfg.d, cfg.s)?;
    Ok(cases
        .iter()
        .enumerate()
        .map(|(index, case)| {
            let opts = VerifyOptions {
                corrupt: cfg.corrupt,
                seed: derive_seed(cfg.seed, index as u64),
            };
            CaseResult {
                index,
                mode: match case.head.mode {
                    ProjectionMode::DataIndependent => "data_independent",
                    ProjectionMode::DataDependent { .. } => "data_dependent",
                },
                feature_map: format!("{:?}", case.fmap.kind()),
                report: verify_suite_with(&case.x, &case.head, &case.fmap, case.s, opts).map_err(|e| e.to_string()),
            }
        })
        .collect())
}

pub fn run(cfg: &VerifyConfig, out: &Path) -> Result<Outcome, CliError> {
    let results = run_grid(cfg)?;
    let failing: Vec<&CaseResult> = results.iter().filter(|r| !r.passed()).collect();
    let cases: Vec<serde_json::Value> = results
        .iter()
        .map(|r| match &r.report {
            Ok(rep) => json!({
                "index": r.index,
                "mode": r.mode,
                "feature_map": r.feature_map,
                "passed": rep.passed(),
                "report": rep,
            }),
            Err(e) => json!({
                "index": r.index,
                "mode": r.mode,
                "feature_map": r.feature_map,
                "passed": false,
                "error": e,
            }),
        })
        .collect();
    write_report(
        &out.join("verify_report.json"),
        json!({
            "command": "verify",
            "passed": failing.is_empty(),
            "cases": cases,
        }),
    )?;
    println!("verify: {} cases, {} failing", results.len(), failing.len());
    for r in failing.iter().take(10) {
        match &r.report {
            Ok(rep) => {
                let names: Vec<&str> = rep.failing().map(|c| c.name.as_str()).collect();
                println!(
                    "  case {} ({}, {}): failed {}",
                    r.index,
                    r.mode,
                    r.feature_map,
                    names.join(", ")
                );
            }
            Err(e) => println!("  case {} ({}, {}): {e}", r.index, r.mode, r.feature_map),
        }
    }
    Ok(if failing.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}
