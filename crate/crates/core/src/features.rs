//! Query/key/value projections and the explicit feature maps applied to
//! queries and keys.
//!
//! Three maps are available:
//!
//! * `Cosine`: `z / max(‖z‖, ε)`, the default used for primal attention.
//! * `Identity`: `z` unchanged.
//! * `RandomExponential`: `exp(−‖z‖²/2) · (exp(w_iᵀz))_i` with `p` frozen
//!   standard-normal directions `w_i`. Together with the [`dhat_normalizer`]
//!   this gives a positive random-feature surrogate of the softmax kernel.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::{math, rng};

/// Default floor for the cosine map's norm.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FeatureKind {
    Cosine,
    Identity,
    RandomExponential,
}

/// Serializable description of a feature map, `{kind, p, seed, epsilon}`.
///
/// `p` is only meaningful for `RandomExponential`; when absent it defaults to
/// the query dimension.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FeatureMapConfig {
    pub kind: FeatureKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub p: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_epsilon"))]
    pub epsilon: f64,
}

#[cfg(feature = "serde")]
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        FeatureMapConfig {
            kind: FeatureKind::Cosine,
            p: None,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// A constructed feature map `ℝ^{d_q} → ℝ^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSpec {
    kind: FeatureKind,
    input_dim: usize,
    p: usize,
    seed: u64,
    epsilon: f64,
    // p × d_q, RandomExponential only
    directions: Option<Matrix>,
}

impl FeatureMapSpec {
    pub fn cosine(dim: usize) -> Self {
        FeatureMapSpec {
            kind: FeatureKind::Cosine,
            input_dim: dim,
            p: dim,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            directions: None,
        }
    }

    pub fn identity(dim: usize) -> Self {
        FeatureMapSpec {
            kind: FeatureKind::Identity,
            ..FeatureMapSpec::cosine(dim)
        }
    }

    /// Draws `p` directions from `N(0, I_{d_q})` using `seed`.
    pub fn random_exponential(dim: usize, p: usize, seed: u64) -> Self {
        let mut g = rng::seeded(seed);
        FeatureMapSpec {
            kind: FeatureKind::RandomExponential,
            input_dim: dim,
            p,
            seed,
            epsilon: DEFAULT_EPSILON,
            directions: Some(rng::normal_matrix(&mut g, p, dim)),
        }
    }

    pub fn from_config(cfg: &FeatureMapConfig, input_dim: usize) -> Result<Self> {
        if cfg.epsilon.is_nan() || cfg.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "feature-map epsilon must be positive, got {}",
                cfg.epsilon
            )));
        }
        let mut spec = match cfg.kind {
            FeatureKind::Cosine | FeatureKind::Identity => {
                if let Some(p) = cfg.p {
                    if p != input_dim {
                        return Err(Error::Config(format!(
                            "{:?} feature map needs p == d_q ({p} != {input_dim})",
                            cfg.kind
                        )));
                    }
                }
                if cfg.kind == FeatureKind::Cosine {
                    FeatureMapSpec::cosine(input_dim)
                } else {
                    FeatureMapSpec::identity(input_dim)
                }
            }
            FeatureKind::RandomExponential => {
                let p = cfg.p.unwrap_or(input_dim);
                if p == 0 {
                    return Err(Error::Config("feature dimension p must be positive".into()));
                }
                FeatureMapSpec::random_exponential(input_dim, p, cfg.seed)
            }
        };
        spec.epsilon = cfg.epsilon;
        Ok(spec)
    }

    pub fn config(&self) -> FeatureMapConfig {
        FeatureMapConfig {
            kind: self.kind,
            p: Some(self.p),
            seed: self.seed,
            epsilon: self.epsilon,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    #[inline]
    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn directions(&self) -> Option<&Matrix> {
        self.directions.as_ref()
    }

    /// Whether scores must be rescaled by `D̂^{-1/2}`.
    pub fn needs_normalizer(&self) -> bool {
        self.kind == FeatureKind::RandomExponential
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim {
            return Err(Error::shape(
                "apply_feature_map",
                format!("input of length {} for a map on ℝ^{}", z.len(), self.input_dim),
            ));
        }
        let out: Vec<f64> = match self.kind {
            FeatureKind::Identity => z.to_vec(),
            FeatureKind::Cosine => {
                let n = norm2(z).max(self.epsilon);
                z.iter().map(|v| v / n).collect()
            }
            FeatureKind::RandomExponential => {
                let w = self.directions.as_ref().expect("random map carries directions");
                let half_sq = 0.5 * dot(z, z);
                (0..self.p).map(|i| math::exp(dot(w.row(i), z) - half_sq)).collect()
            }
        };
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite("feature map output".into()))
        }
    }

    /// Applies the map to every row.
    pub fn apply_rows(&self, z: &Matrix) -> Result<Matrix> {
        let mut data = Vec::with_capacity(z.rows() * self.p);
        for i in 0..z.rows() {
            data.extend(self.apply(z.row(i))?);
        }
        Matrix::new(z.rows(), self.p, data)
    }
}

pub fn apply_feature_map(spec: &FeatureMapSpec, z: &[f64]) -> Result<Vec<f64>> {
    spec.apply(z)
}

/// `D̂_i = φ_q(x_i)ᵀ Σ_j φ_k(x_j)`.
pub fn dhat_normalizer(phi_q: &Matrix, phi_k: &Matrix) -> Result<Vec<f64>> {
    check_pair(phi_q, phi_k)?;
    let k_sum = phi_k.col_sums();
    let d: Vec<f64> = (0..phi_q.rows()).map(|i| dot(phi_q.row(i), &k_sum)).collect();
    check_positive(&d)?;
    Ok(d)
}

/// Prefix variant for causal attention: `D̂_i = φ_q(x_i)ᵀ Σ_{j≤i} φ_k(x_j)`.
pub fn dhat_normalizer_causal(phi_q: &Matrix, phi_k: &Matrix) -> Result<Vec<f64>> {
    check_pair(phi_q, phi_k)?;
    let mut running = alloc::vec![0.0; phi_k.cols()];
    let mut d = Vec::with_capacity(phi_q.rows());
    for i in 0..phi_q.rows() {
        running.iter_mut().zip(phi_k.row(i)).for_each(|(a, b)| *a += b);
        d.push(dot(phi_q.row(i), &running));
    }
    check_positive(&d)?;
    Ok(d)
}

fn check_pair(phi_q: &Matrix, phi_k: &Matrix) -> Result<()> {
    if phi_q.shape() != phi_k.shape() {
        return Err(Error::shape(
            "dhat_normalizer",
            format!("{:?} vs {:?}", phi_q.shape(), phi_k.shape()),
        ));
    }
    Ok(())
}

fn check_positive(d: &[f64]) -> Result<()> {
    match d.iter().position(|&v| v.is_nan() || v <= 0.0) {
        Some(index) => Err(Error::DegenerateNormalizer { index, value: d[index] }),
        None => Ok(()),
    }
}

/// Linear query/key/value projections. `w_v` is only present for the
/// canonical softmax baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Option<Matrix>,
}

/// Per-row projections `Q = X W_qᵀ`, `K = X W_kᵀ`, `V = X W_vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Option<Matrix>,
}

impl ProjectionSet {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Option<Matrix>) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::shape(
                "ProjectionSet",
                format!(
                    "W_q {:?} and W_k {:?} must agree (d_q == d_k)",
                    w_q.shape(),
                    w_k.shape()
                ),
            ));
        }
        if let Some(v) = &w_v {
            if v.cols() != w_q.cols() {
                return Err(Error::shape(
                    "ProjectionSet",
                    format!("W_v has {} input columns, expected {}", v.cols(), w_q.cols()),
                ));
            }
        }
        Ok(ProjectionSet { w_q, w_k, w_v })
    }

    /// Model dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// `d_q == d_k`.
    pub fn qk_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn project(&self, x: &Matrix) -> Result<Projections> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "project",
                format!(
                    "input has {} columns, projections expect {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        Ok(Projections {
            q: x.matmul_nt(&self.w_q)?,
            k: x.matmul_nt(&self.w_k)?,
            v: self.w_v.as_ref().map(|w| x.matmul_nt(w)).transpose()?,
        })
    }
}

pub fn project(ps: &ProjectionSet, x: &Matrix) -> Result<Projections> {
    ps.project(x)
}
