use std::path::Path;
use std::time::Instant;

use serde_json::json;

use primal_attention::attention::{
    canonical_cost, primal_cost, primal_forward, softmax_attention_matrix, Cost, HeadParams, OutputMap, ProjectionMode,
};
use primal_attention::features::{FeatureMapSpec, ProjectionSet};
use primal_attention::{rng, Matrix};

use crate::config::BenchConfig;
use crate::error::CliError;
use crate::io::write_atomic;
use crate::io::write_report;
use crate::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    /// Data-independent primal heads with the cosine map.
    Primal,
    Canonical,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Primal => "primal",
            Mechanism::Canonical => "canonical",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub n: usize,
    pub median_seconds: f64,
    /// Summed over heads.
    pub cost: Cost,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_repeats(repeats: usize, mut f: impl FnMut() -> Result<(), CliError>) -> Result<f64, CliError> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn scale_cost(c: Cost, heads: usize) -> Cost {
    let h = heads as u64;
    Cost {
        projection_flops: c.projection_flops * h,
        attention_flops: c.attention_flops * h,
        buffer_bytes: c.buffer_bytes * h,
    }
}

/// Times one mechanism at one length. Primal timings cover the whole head,
/// whose cost is linear in `n`; canonical timings cover the attention proper
/// on precomputed queries, keys and values.
pub fn bench_one(cfg: &BenchConfig, mechanism: Mechanism, n: usize) -> Result<BenchRow, CliError> {
    let mut g = rng::seeded(rng::derive_seed(cfg.seed, n as u64));
    let x = rng::normal_matrix(&mut g, n, cfg.d);
    let scale = 1.0 / (cfg.d as f64).sqrt();
    let (seconds, cost) = match mechanism {
        Mechanism::Primal => {
            let fmap = FeatureMapSpec::cosine(cfg.d);
            let heads: Vec<(HeadParams, OutputMap)> = (0..cfg.heads)
                .map(|_| -> Result<_, CliError> {
                    let ps = ProjectionSet::new(
                        rng::uniform_matrix(&mut g, cfg.d, cfg.d, scale),
                        rng::uniform_matrix(&mut g, cfg.d, cfg.d, scale),
                        None,
                    )?;
                    let hp = HeadParams::new(
                        ps,
                        rng::normal_matrix(&mut g, cfg.d, cfg.s),
                        rng::normal_matrix(&mut g, cfg.d, cfg.s),
                        vec![0.0; cfg.s],
                        ProjectionMode::DataIndependent,
                        false,
                    )?;
                    let om = OutputMap {
                        w_o: rng::uniform_matrix(&mut g, cfg.d_v, 2 * cfg.s, scale),
                    };
                    Ok((hp, om))
                })
                .collect::<Result<_, _>>()?;
            let secs = time_repeats(cfg.repeats, || {
                for (hp, om) in &heads {
                    std::hint::black_box(primal_forward(&x, hp, &fmap, om)?);
                }
                Ok(())
            })?;
            let c = primal_cost(
                n,
                cfg.d,
                cfg.d,
                cfg.d,
                cfg.s,
                cfg.d_v,
                ProjectionMode::DataIndependent,
                false,
                fmap.kind(),
            );
            (secs, scale_cost(c, cfg.heads))
        }
        Mechanism::Canonical => {
            let qkv: Vec<(Matrix, Matrix, Matrix)> = (0..cfg.heads)
                .map(|_| -> Result<_, CliError> {
                    let wq = rng::uniform_matrix(&mut g, cfg.d, cfg.d, scale);
                    let wk = rng::uniform_matrix(&mut g, cfg.d, cfg.d, scale);
                    let wv = rng::uniform_matrix(&mut g, cfg.d_v, cfg.d, scale);
                    Ok((x.matmul_nt(&wq)?, x.matmul_nt(&wk)?, x.matmul_nt(&wv)?))
                })
                .collect::<Result<_, _>>()?;
            let secs = time_repeats(cfg.repeats, || {
                for (q, k, v) in &qkv {
                    let a = softmax_attention_matrix(q, k, false)?;
                    std::hint::black_box(a.matmul(v)?);
                }
                Ok(())
            })?;
            (secs, scale_cost(canonical_cost(n, cfg.d, cfg.d, cfg.d_v), cfg.heads))
        }
    };
    Ok(BenchRow {
        mechanism,
        n,
        median_seconds: seconds,
        cost,
    })
}

pub fn bench_rows(cfg: &BenchConfig) -> Result<Vec<BenchRow>, CliError> {
    let mut rows = Vec::new();
    for mechanism in [Mechanism::Primal, Mechanism::Canonical] {
        for &n in &cfg.ns {
            rows.push(bench_one(cfg, mechanism, n)?);
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("mechanism,n,median_seconds,attention_flops,projection_flops,buffer_bytes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9e},{},{},{}\n",
            r.mechanism.name(),
            r.n,
            r.median_seconds,
            r.cost.attention_flops,
            r.cost.projection_flops,
            r.cost.buffer_bytes
        ));
    }
    out
}

pub fn run(cfg: &BenchConfig, out: &Path) -> Result<Outcome, CliError> {
    let rows = bench_rows(cfg)?;
    write_atomic(&out.join("bench.csv"), to_csv(&rows).as_bytes())?;
    let mut ratios = Vec::new();
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.mechanism == b.mechanism {
            ratios.push(json!({
                "mechanism": a.mechanism.name(),
                "n": a.n,
                "n_next": b.n,
                "flop_ratio": b.cost.attention_flops as f64 / a.cost.attention_flops as f64,
                "time_ratio": b.median_seconds / a.median_seconds,
            }));
        }
    }
    for r in &rows {
        println!(
            "bench: {:9} n={:6} median {:.3e} s, {} flops",
            r.mechanism.name(),
            r.n,
            r.median_seconds,
            r.cost.attention_flops
        );
    }
    write_report(
        &out.join("bench_report.json"),
        json!({ "command": "bench", "ratios": ratios }),
    )?;
    Ok(Outcome::Pass)
}
