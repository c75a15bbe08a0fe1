//! The KSVD regularization objective of a primal head and the total loss.
//!
//! ```text
//! J(W_e, W_r, Λ) = ½ Σ_i e_iᵀ Λ e_i + ½ Σ_j r_jᵀ Λ r_j − Tr(W_eᵀ W_r)
//! ```
//!
//! The trace term always uses the raw parameters, never the folded
//! `W_{e|X}`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;

fn check_lambda(lambda: &[f64], s: usize) -> Result<()> {
    if lambda.len() != s {
        return Err(Error::shape(
            "ksvd_objective",
            format!("{} Λ entries for s = {s}", lambda.len()),
        ));
    }
    if lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Config("Λ must be positive and finite".into()));
    }
    Ok(())
}

fn trace_tn(w_e: &Matrix, w_r: &Matrix) -> Result<f64> {
    if w_e.shape() != w_r.shape() {
        return Err(Error::shape(
            "ksvd_objective",
            format!("W_e {:?} vs W_r {:?}", w_e.shape(), w_r.shape()),
        ));
    }
    Ok(w_e.as_slice().iter().zip(w_r.as_slice()).map(|(a, b)| a * b).sum())
}

fn col_sq(m: &Matrix, col: usize) -> f64 {
    (0..m.rows()).map(|i| m[(i, col)] * m[(i, col)]).sum()
}

// Per-direction contributions are summed in sorted order, which makes `J`
// bit-identical under any permutation of the directions.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `J` from per-token scores and the raw weights.
pub fn ksvd_objective(e: &Matrix, r: &Matrix, w_e: &Matrix, w_r: &Matrix, lambda: &[f64]) -> Result<f64> {
    let s = e.cols();
    if r.shape() != e.shape() || w_e.cols() != s {
        return Err(Error::shape(
            "ksvd_objective",
            format!(
                "scores {:?}/{:?} and weights {:?} disagree on s",
                e.shape(),
                r.shape(),
                w_e.shape()
            ),
        ));
    }
    check_lambda(lambda, s)?;
    if w_e.shape() != w_r.shape() {
        return Err(Error::shape(
            "ksvd_objective",
            format!("W_e {:?} vs W_r {:?}", w_e.shape(), w_r.shape()),
        ));
    }
    let terms = (0..s)
        .map(|l| {
            let tr: f64 = (0..w_e.rows()).map(|a| w_e[(a, l)] * w_r[(a, l)]).sum();
            0.5 * lambda[l] * (col_sq(e, l) + col_sq(r, l)) - tr
        })
        .collect();
    let j = sorted_sum(terms);
    if !j.is_finite() {
        return Err(Error::NonFinite("ksvd_objective".into()));
    }
    Ok(j)
}

/// `J` in squared-norm form: `½ Σ_i ‖(W_{e|X} Λ^{1/2})ᵀ φ_q(x_i)‖²` plus the
/// key-side term, minus the trace. `we_x`/`wr_x` are the folded weights
/// (`p × s`); the rows of `phi_q`/`phi_k` are the (already normalized)
/// features.
pub fn ksvd_objective_squared_norm(
    phi_q: &Matrix,
    phi_k: &Matrix,
    we_x: &Matrix,
    wr_x: &Matrix,
    w_e: &Matrix,
    w_r: &Matrix,
    lambda: &[f64],
) -> Result<f64> {
    let s = we_x.cols();
    check_lambda(lambda, s)?;
    let half: Vec<f64> = lambda.iter().map(|&l| math::sqrt(l)).collect();
    let a = we_x.scale_cols(&half)?;
    let b = wr_x.scale_cols(&half)?;
    let mut acc = 0.0;
    for (phi, w) in [(phi_q, &a), (phi_k, &b)] {
        let scores = phi.matmul(w)?;
        acc += 0.5 * scores.as_slice().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(acc - trace_tn(w_e, w_r)?)
}

/// Decomposition of the regularizer over heads and layers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KsvdLossReport {
    /// `per_head_j[l][h]`, primal layers only.
    pub per_head_j: Vec<Vec<f64>>,
    /// Mean over heads of each entry of `per_head_j`.
    pub per_layer_j: Vec<f64>,
    /// `η Σ_l J_l²`.
    pub penalty: f64,
    pub eta: f64,
}

impl KsvdLossReport {
    pub fn new(per_head_j: Vec<Vec<f64>>, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be a finite nonnegative value, got {eta}"
            )));
        }
        let per_layer_j: Vec<f64> = per_head_j
            .iter()
            .map(|heads| {
                if heads.is_empty() {
                    0.0
                } else {
                    heads.iter().sum::<f64>() / heads.len() as f64
                }
            })
            .collect();
        let penalty = penalty(&per_layer_j, eta);
        Ok(KsvdLossReport {
            per_head_j,
            per_layer_j,
            penalty,
            eta,
        })
    }
}

/// `η Σ_l J_l²`.
pub fn penalty(per_layer_j: &[f64], eta: f64) -> f64 {
    eta * per_layer_j.iter().map(|j| j * j).sum::<f64>()
}

/// `L + η Σ_l J_l²`.
pub fn total_loss(task_loss: f64, per_layer_j: &[f64], eta: f64) -> f64 {
    task_loss + penalty(per_layer_j, eta)
}
