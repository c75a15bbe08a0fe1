//! Singular value spectra and cumulative explained variance.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::Result;
use crate::linalg::{format_f64, svd, Matrix};

/// Thresholds reported alongside every spectrum.
pub const RANK_THRESHOLDS: [f64; 3] = [0.9, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// Entry `k` is `Σ_{i≤k} σ_i² / Σ σ_i²`.
    pub explained_variance: Vec<f64>,
    /// Entry `k` is `Σ_{i≤k} σ_i / Σ σ_i`.
    pub explained_sigma: Vec<f64>,
}

fn cumulative(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let total: f64 = values.clone().sum();
    let n = values.clone().count();
    if total <= 0.0 {
        return alloc::vec![0.0; n];
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = values
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

impl SpectrumReport {
    pub fn from_singular_values(mut singular_values: Vec<f64>) -> Self {
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let explained_variance = cumulative(singular_values.iter().map(|s| s * s));
        let explained_sigma = cumulative(singular_values.iter().copied());
        SpectrumReport {
            singular_values,
            explained_variance,
            explained_sigma,
        }
    }

    /// Smallest `k` (1-based) whose cumulative explained variance reaches
    /// `tau`; 0 for an all-zero spectrum.
    pub fn effective_rank(&self, tau: f64) -> usize {
        self.explained_variance
            .iter()
            .position(|&v| v >= tau)
            .map_or(0, |k| k + 1)
    }

    /// `k,sigma_k,cum_explained_variance,cum_explained_sigma` with 1-based
    /// `k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sigma_k,cum_explained_variance,cum_explained_sigma\n");
        for (k, ((s, v), e)) in self
            .singular_values
            .iter()
            .zip(&self.explained_variance)
            .zip(&self.explained_sigma)
            .enumerate()
        {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                k + 1,
                format_f64(*s),
                format_f64(*v),
                format_f64(*e)
            );
        }
        out
    }
}

/// Full singular value spectrum of `m`.
pub fn spectrum(m: &Matrix) -> Result<SpectrumReport> {
    let r = m.rows().min(m.cols());
    let res = svd(m, r)?;
    Ok(SpectrumReport::from_singular_values(res.sigma))
}
