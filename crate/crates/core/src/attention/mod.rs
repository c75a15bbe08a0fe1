//! Primal attention and the canonical softmax baseline.
//!
//! A primal head never forms the `N × N` kernel. With feature maps `φ_q`,
//! `φ_k` it emits two score sets per token,
//!
//! ```text
//! e_i = W_{e|X}ᵀ φ_q(q(x_i)),    r_i = W_{r|X}ᵀ φ_k(k(x_i)),
//! ```
//!
//! and maps the concatenation `[e_i; r_i]` back to `d_v` with `W_o`. In the
//! data-independent mode `W_{e|X} = W_e ∈ ℝ^{p×s}`. In the data-dependent mode
//! `W_{e|X} = F_Xᵀ W_e` where `F_X` is a uniform row subsample of the input of
//! size `n = min(s · rank_multi, N)`, which forces `p == d`.

mod cost;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::{dhat_normalizer, dhat_normalizer_causal, FeatureMapSpec, ProjectionSet};
use crate::linalg::Matrix;
use crate::{math, rng};

pub use cost::{canonical_cost, primal_cost, Cost};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ProjectionMode {
    DataIndependent,
    DataDependent { rank_multi: usize, subsample_seed: u64 },
}

/// Learnable parameters of one primal head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub projections: ProjectionSet,
    /// `p × s` (data-independent) or `n × s` (data-dependent).
    pub w_e: Matrix,
    pub w_r: Matrix,
    /// `Λ = exp(lambda_raw)` elementwise.
    pub lambda_raw: Vec<f64>,
    pub mode: ProjectionMode,
    pub causal: bool,
}

impl HeadParams {
    pub fn new(
        projections: ProjectionSet,
        w_e: Matrix,
        w_r: Matrix,
        lambda_raw: Vec<f64>,
        mode: ProjectionMode,
        causal: bool,
    ) -> Result<Self> {
        if w_e.shape() != w_r.shape() {
            return Err(Error::shape(
                "HeadParams",
                format!("W_e {:?} vs W_r {:?}", w_e.shape(), w_r.shape()),
            ));
        }
        if lambda_raw.len() != w_e.cols() {
            return Err(Error::shape(
                "HeadParams",
                format!("{} Λ entries for s = {}", lambda_raw.len(), w_e.cols()),
            ));
        }
        if lambda_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lambda_raw".into()));
        }
        if let ProjectionMode::DataDependent { rank_multi: 0, .. } = mode {
            return Err(Error::Config("rank_multi must be positive".into()));
        }
        Ok(HeadParams {
            projections,
            w_e,
            w_r,
            lambda_raw,
            mode,
            causal,
        })
    }

    /// Fan-in scaled uniform initialization with `Λ = I`.
    ///
    /// `seq_len` sizes `W_e`/`W_r` in the data-dependent mode.
    pub fn init(
        g: &mut rng::Rng,
        d_model: usize,
        fmap: &FeatureMapSpec,
        s: usize,
        mode: ProjectionMode,
        causal: bool,
        seq_len: usize,
    ) -> Self {
        let dq = fmap.input_dim();
        let a = 1.0 / math::sqrt(d_model as f64);
        let w_q = rng::uniform_matrix(g, dq, d_model, a);
        let w_k = rng::uniform_matrix(g, dq, d_model, a);
        let rows = weight_rows(mode, causal, fmap.output_dim(), s, seq_len);
        let b = 1.0 / math::sqrt(rows as f64);
        let w_e = rng::uniform_matrix(g, rows, s, b);
        let w_r = rng::uniform_matrix(g, rows, s, b);
        HeadParams {
            projections: ProjectionSet { w_q, w_k, w_v: None },
            w_e,
            w_r,
            lambda_raw: vec![0.0; s],
            mode,
            causal,
        }
    }

    /// Number of projection directions.
    #[inline]
    pub fn s(&self) -> usize {
        self.w_e.cols()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.lambda_raw.iter().map(|&v| math::exp(v)).collect()
    }
}

/// Rows of `W_e`/`W_r` for a head: `p`, `min(s · rank_multi, N)`, or `N` for
/// causal data-dependent heads (no subsampling).
pub fn weight_rows(mode: ProjectionMode, causal: bool, p: usize, s: usize, seq_len: usize) -> usize {
    match mode {
        ProjectionMode::DataIndependent => p,
        ProjectionMode::DataDependent { .. } if causal => seq_len,
        ProjectionMode::DataDependent { rank_multi, .. } => (s * rank_multi).min(seq_len),
    }
}

/// Maps the `2s` concatenated scores back to `d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    /// `d_v × 2s`.
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub e_scores: Matrix,
    pub r_scores: Matrix,
    /// Row `i` is `[e_i ; r_i]`.
    pub concatenated: Matrix,
    pub projected: Matrix,
}

/// The subsampled `F_X = X′` and the source row indices (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct FxSample {
    pub indices: Vec<usize>,
    pub fx: Matrix,
}

/// Uniform subsample of `n = min(s · rank_multi, N)` rows of `x`, drawn
/// without replacement from the head's `subsample_seed`. Causal heads use the
/// full sequence.
pub fn build_fx(x: &Matrix, params: &HeadParams) -> Result<FxSample> {
    let ProjectionMode::DataDependent {
        rank_multi,
        subsample_seed,
    } = params.mode
    else {
        return Err(Error::Config("build_fx requires the data-dependent mode".into()));
    };
    let n_tokens = x.rows();
    let n = if params.causal {
        n_tokens
    } else {
        (params.s() * rank_multi).min(n_tokens)
    };
    let indices = if n == n_tokens {
        (0..n_tokens).collect()
    } else {
        rng::sample_indices(&mut rng::seeded(subsample_seed), n_tokens, n)
    };
    let fx = x.select_rows(&indices)?;
    Ok(FxSample { indices, fx })
}

fn named<T>(r: Result<T>, tensor: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite(String::from(tensor)),
        other => other,
    })
}

fn validate_primal(x: &Matrix, params: &HeadParams, fmap: &FeatureMapSpec, out_map: &OutputMap) -> Result<()> {
    let s = params.s();
    if s == 0 {
        return Err(Error::shape("primal_forward", "s must be at least 1"));
    }
    if fmap.input_dim() != params.projections.qk_dim() {
        return Err(Error::shape(
            "primal_forward",
            format!(
                "feature map expects d_q = {}, projections give {}",
                fmap.input_dim(),
                params.projections.qk_dim()
            ),
        ));
    }
    let p = fmap.output_dim();
    let n_tokens = x.rows();
    match params.mode {
        ProjectionMode::DataIndependent => {
            if params.w_e.rows() != p {
                return Err(Error::shape(
                    "primal_forward",
                    format!("W_e has {} rows, expected p = {p}", params.w_e.rows()),
                ));
            }
        }
        ProjectionMode::DataDependent { .. } => {
            if p != x.cols() {
                return Err(Error::shape(
                    "primal_forward",
                    format!("data-dependent weights need p == d ({p} != {})", x.cols()),
                ));
            }
            let need = weight_rows(params.mode, params.causal, p, s, n_tokens);
            let ok = if params.causal {
                params.w_e.rows() >= need
            } else {
                params.w_e.rows() == need
            };
            if !ok {
                return Err(Error::shape(
                    "primal_forward",
                    format!("W_e has {} rows, expected {need} for N = {n_tokens}", params.w_e.rows()),
                ));
            }
        }
    }
    if out_map.w_o.cols() != 2 * s {
        return Err(Error::shape(
            "primal_forward",
            format!("W_o has {} columns, expected 2s = {}", out_map.w_o.cols(), 2 * s),
        ));
    }
    Ok(())
}

/// Primal attention forward pass for one head.
pub fn primal_forward(
    x: &Matrix,
    params: &HeadParams,
    fmap: &FeatureMapSpec,
    out_map: &OutputMap,
) -> Result<AttentionOutput> {
    validate_primal(x, params, fmap, out_map)?;
    let fx = match params.mode {
        ProjectionMode::DataDependent { .. } if !params.causal => Some(build_fx(x, params)?.fx),
        _ => None,
    };
    let (e, r) = scores(x, params, fmap, fx.as_ref())?;
    let concatenated = Matrix::hstack(&[&e, &r])?;
    let projected = named(concatenated.matmul_nt(&out_map.w_o), "projected")?;
    Ok(AttentionOutput {
        e_scores: e,
        r_scores: r,
        concatenated,
        projected,
    })
}

/// e/r scores of a non-causal data-dependent head folded against an explicit
/// `F_X` (`n × d`, with `n` the row count of `W_e`).
pub fn primal_scores_with_fx(
    x: &Matrix,
    params: &HeadParams,
    fmap: &FeatureMapSpec,
    fx: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if params.causal || params.mode == ProjectionMode::DataIndependent {
        return Err(Error::Config(
            "an explicit F_X applies to non-causal data-dependent heads".into(),
        ));
    }
    if fx.rows() != params.w_e.rows() || fx.cols() != x.cols() || fmap.output_dim() != x.cols() {
        return Err(Error::shape(
            "primal_scores_with_fx",
            format!(
                "F_X {:?}, W_e {:?}, p = {}, d = {}",
                fx.shape(),
                params.w_e.shape(),
                fmap.output_dim(),
                x.cols()
            ),
        ));
    }
    if fmap.input_dim() != params.projections.qk_dim() {
        return Err(Error::shape(
            "primal_scores_with_fx",
            "feature map and projections disagree on d_q",
        ));
    }
    scores(x, params, fmap, Some(fx))
}

fn scores(x: &Matrix, params: &HeadParams, fmap: &FeatureMapSpec, fx: Option<&Matrix>) -> Result<(Matrix, Matrix)> {
    let proj = named(params.projections.project(x), "projections")?;
    let phi_q = named(fmap.apply_rows(&proj.q), "phi_q")?;
    let phi_k = named(fmap.apply_rows(&proj.k), "phi_k")?;

    let (mut e, mut r) = match (params.mode, fx) {
        (ProjectionMode::DataIndependent, _) => (
            named(phi_q.matmul(&params.w_e), "e_scores")?,
            named(phi_k.matmul(&params.w_r), "r_scores")?,
        ),
        (ProjectionMode::DataDependent { .. }, Some(fx)) => {
            let we_x = named(fx.matmul_tn(&params.w_e), "w_e_folded")?;
            let wr_x = named(fx.matmul_tn(&params.w_r), "w_r_folded")?;
            (
                named(phi_q.matmul(&we_x), "e_scores")?,
                named(phi_k.matmul(&wr_x), "r_scores")?,
            )
        }
        (ProjectionMode::DataDependent { .. }, None) => (
            named(causal_scores(x, &params.w_e, &phi_q), "e_scores")?,
            named(causal_scores(x, &params.w_r, &phi_k), "r_scores")?,
        ),
    };

    if fmap.needs_normalizer() {
        let d = if params.causal {
            dhat_normalizer_causal(&phi_q, &phi_k)?
        } else {
            dhat_normalizer(&phi_q, &phi_k)?
        };
        let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / math::sqrt(*v)).collect();
        e = named(e.scale_rows(&inv_sqrt), "e_scores")?;
        r = named(r.scale_rows(&inv_sqrt), "r_scores")?;
    }
    Ok((e, r))
}

// Prefix-restricted mixing `out_i = Σ_{j≤i} W[j,:] ⟨x_j, φ_i⟩` evaluated with
// a running `d × s` accumulator, so the cost stays linear in N.
fn causal_scores(x: &Matrix, w: &Matrix, phi: &Matrix) -> Result<Matrix> {
    let (n, d) = x.shape();
    let s = w.cols();
    let mut acc = vec![0.0; d * s];
    let mut out = Matrix::zeros(n, s);
    for i in 0..n {
        let xi = x.row(i);
        let wi = w.row(i);
        for (a, &xa) in xi.iter().enumerate() {
            let row = &mut acc[a * s..(a + 1) * s];
            row.iter_mut().zip(wi).for_each(|(p, &wv)| *p += xa * wv);
        }
        let phi_i = phi.row(i);
        let o = out.row_mut(i);
        for (a, &fa) in phi_i.iter().enumerate() {
            let row = &acc[a * s..(a + 1) * s];
            o.iter_mut().zip(row).for_each(|(ov, &p)| *ov += fa * p);
        }
    }
    out.check_finite("causal_scores")?;
    Ok(out)
}

/// Row-softmax attention weights `softmax_j(⟨q_i, k_j⟩ / √d_k)`, optionally
/// restricted to `j ≤ i`.
pub fn softmax_attention_matrix(q: &Matrix, k: &Matrix, causal: bool) -> Result<Matrix> {
    let mut a = q.matmul_nt(k)?;
    let scale = 1.0 / math::sqrt(q.cols() as f64);
    let n = a.cols();
    for i in 0..a.rows() {
        let limit = if causal { (i + 1).min(n) } else { n };
        let row = a.row_mut(i);
        let mut mx = f64::NEG_INFINITY;
        for v in &mut row[..limit] {
            *v *= scale;
            mx = mx.max(*v);
        }
        let mut z = 0.0;
        for v in &mut row[..limit] {
            *v = math::exp(*v - mx);
            z += *v;
        }
        for v in &mut row[..limit] {
            *v /= z;
        }
        for v in &mut row[limit..] {
            *v = 0.0;
        }
    }
    Ok(a)
}

/// The canonical attention matrix of a head with value projections.
pub fn canonical_attention_matrix(x: &Matrix, ps: &ProjectionSet, causal: bool) -> Result<Matrix> {
    let proj = ps.project(x)?;
    softmax_attention_matrix(&proj.q, &proj.k, causal)
}

/// `o_i = Σ_j softmax_j(⟨q_i, k_j⟩/√d_k) v_j`.
pub fn canonical_forward(x: &Matrix, ps: &ProjectionSet) -> Result<Matrix> {
    canonical_forward_masked(x, ps, false)
}

pub fn canonical_forward_masked(x: &Matrix, ps: &ProjectionSet, causal: bool) -> Result<Matrix> {
    let proj = ps.project(x)?;
    let v = proj
        .v
        .ok_or_else(|| Error::Config("canonical attention needs a value projection".into()))?;
    let a = softmax_attention_matrix(&proj.q, &proj.k, causal)?;
    named(a.matmul(&v), "canonical_output")
}

/// Runs every head on the full input, concatenates the projected outputs
/// along the feature axis and applies `mixer` (`d_model × h·d_v`).
pub fn multi_head_forward(
    x: &Matrix,
    heads: &[HeadParams],
    head_out_maps: &[OutputMap],
    fmap: &FeatureMapSpec,
    mixer: &Matrix,
) -> Result<Matrix> {
    if heads.is_empty() || heads.len() != head_out_maps.len() {
        return Err(Error::shape(
            "multi_head_forward",
            format!("{} heads with {} output maps", heads.len(), head_out_maps.len()),
        ));
    }
    let outs = heads
        .iter()
        .zip(head_out_maps)
        .map(|(h, o)| primal_forward(x, h, fmap, o).map(|a| a.projected))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = outs.iter().collect();
    let cat = Matrix::hstack(&refs)?;
    if mixer.cols() != cat.cols() {
        return Err(Error::shape(
            "multi_head_forward",
            format!("mixer has {} columns for {} features", mixer.cols(), cat.cols()),
        ));
    }
    cat.matmul_nt(mixer)
}

/// Dual e-score expansion `Σ_j h_{r_j} K_ij`, i.e. `K H_r`.
pub fn dual_e_scores(kernel: &Matrix, h_r: &Matrix) -> Result<Matrix> {
    kernel.matmul(h_r)
}

/// Dual r-score expansion `Σ_i h_{e_i} K_ij`, i.e. `Kᵀ H_e`.
pub fn dual_r_scores(kernel: &Matrix, h_e: &Matrix) -> Result<Matrix> {
    kernel.matmul_tn(h_e)
}
