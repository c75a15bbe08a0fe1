//! The dual side of a primal head: the asymmetric kernel it induces, the
//! kernel SVD, the stationary primal parameters recovered from the singular
//! vectors, and a suite of residual checks tying the two sides together.
//!
//! For a non-causal head with (normalized) features `a_i = F_X φ_q(x_i)` and
//! `b_j = F_X φ_k(x_j)` (`F_X` omitted in the data-independent mode), the
//! kernel is `K = A Bᵀ`. Its top singular triplets `K H_r = H_e Σ`,
//! `Kᵀ H_e = H_r Σ` give `W_e* = Bᵀ H_r`, `W_r* = Aᵀ H_e` and `Λ* = Σ⁻¹`.
//!
//! Causal heads are rejected: their prefix-restricted scores are not
//! expansions over a single kernel.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{build_fx, primal_forward, primal_scores_with_fx, HeadParams, OutputMap, ProjectionMode};
use crate::error::{Error, Result};
use crate::features::{dhat_normalizer, FeatureMapSpec};
use crate::linalg::{svd, Matrix};
use crate::objective::ksvd_objective;
use crate::{math, rng};

/// Smallest singular value [`stationary_params`] will invert.
pub const MIN_SIGMA: f64 = 1e-12;

/// Row factors of the kernel, `K = a · bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactors {
    pub a: Matrix,
    pub b: Matrix,
    /// `F_X` in the data-dependent mode.
    pub fx: Option<Matrix>,
}

/// Features of a non-causal head with the `D̂^{-1/2}` row scaling folded in
/// when the map needs it.
pub fn kernel_factors(x: &Matrix, params: &HeadParams, fmap: &FeatureMapSpec) -> Result<KernelFactors> {
    if params.causal {
        return Err(Error::Config("the dual kernel is defined for non-causal heads".into()));
    }
    if fmap.input_dim() != params.projections.qk_dim() {
        return Err(Error::shape(
            "build_kernel",
            "feature map and projections disagree on d_q",
        ));
    }
    let proj = params.projections.project(x)?;
    let mut phi_q = fmap.apply_rows(&proj.q)?;
    let mut phi_k = fmap.apply_rows(&proj.k)?;
    if fmap.needs_normalizer() {
        let d = dhat_normalizer(&phi_q, &phi_k)?;
        let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / math::sqrt(*v)).collect();
        phi_q = phi_q.scale_rows(&inv_sqrt)?;
        phi_k = phi_k.scale_rows(&inv_sqrt)?;
    }
    match params.mode {
        ProjectionMode::DataIndependent => Ok(KernelFactors {
            a: phi_q,
            b: phi_k,
            fx: None,
        }),
        ProjectionMode::DataDependent { .. } => {
            if fmap.output_dim() != x.cols() {
                return Err(Error::shape(
                    "build_kernel",
                    format!(
                        "data-dependent heads need p == d ({} != {})",
                        fmap.output_dim(),
                        x.cols()
                    ),
                ));
            }
            let fx = build_fx(x, params)?.fx;
            Ok(KernelFactors {
                a: phi_q.matmul_nt(&fx)?,
                b: phi_k.matmul_nt(&fx)?,
                fx: Some(fx),
            })
        }
    }
}

/// `K_ij = ⟨F_X φ_q(x_i), F_X φ_k(x_j)⟩` (or `⟨φ_q(x_i), φ_k(x_j)⟩`).
pub fn build_kernel(x: &Matrix, params: &HeadParams, fmap: &FeatureMapSpec) -> Result<Matrix> {
    let f = kernel_factors(x, params, fmap)?;
    f.a.matmul_nt(&f.b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsvdSolution {
    /// `N × s`, left singular vectors.
    pub h_e: Matrix,
    /// `N × s`, right singular vectors.
    pub h_r: Matrix,
    /// Positive, nonincreasing.
    pub sigma: Vec<f64>,
    pub requested: usize,
    /// Set when zero singular values were dropped and `s` shrank.
    pub truncated: bool,
}

impl KsvdSolution {
    #[inline]
    pub fn s(&self) -> usize {
        self.sigma.len()
    }
}

/// Top-`s` singular triplets of `k`, dropping singular values at or below
/// `N · ε · σ_1`.
pub fn ksvd_solve(k: &Matrix, s: usize) -> Result<KsvdSolution> {
    let n = k.rows();
    if k.cols() != n {
        return Err(Error::shape(
            "ksvd_solve",
            format!("kernel must be square, got {:?}", k.shape()),
        ));
    }
    if s == 0 || s > n {
        return Err(Error::shape("ksvd_solve", format!("s = {s} outside 1..={n}")));
    }
    let res = svd(k, s)?;
    let floor = n as f64 * f64::EPSILON * res.sigma[0];
    let keep = res.sigma.iter().take_while(|&&v| v > floor && v > 0.0).count();
    if keep == 0 {
        return Err(Error::IllConditioned {
            index: 0,
            sigma: res.sigma[0],
        });
    }
    Ok(KsvdSolution {
        h_e: res.u.leading_cols(keep),
        h_r: res.v.leading_cols(keep),
        sigma: res.sigma[..keep].to_vec(),
        requested: s,
        truncated: keep < s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryParams {
    pub w_e_star: Matrix,
    pub w_r_star: Matrix,
    /// `Σ⁻¹`.
    pub lambda_star: Vec<f64>,
}

/// KKT stationary parameters for a solution of the kernel built from
/// `(x, params, fmap)`.
pub fn stationary_params(
    sol: &KsvdSolution,
    x: &Matrix,
    params: &HeadParams,
    fmap: &FeatureMapSpec,
) -> Result<StationaryParams> {
    let f = kernel_factors(x, params, fmap)?;
    stationary_from_factors(sol, &f)
}

fn stationary_from_factors(sol: &KsvdSolution, f: &KernelFactors) -> Result<StationaryParams> {
    if sol.h_e.rows() != f.a.rows() || sol.h_r.rows() != f.b.rows() {
        return Err(Error::shape(
            "stationary_params",
            format!("solution has {} rows for N = {}", sol.h_e.rows(), f.a.rows()),
        ));
    }
    if let Some(index) = sol.sigma.iter().position(|&v| v < MIN_SIGMA) {
        return Err(Error::IllConditioned {
            index,
            sigma: sol.sigma[index],
        });
    }
    Ok(StationaryParams {
        w_e_star: f.b.matmul_tn(&sol.h_r)?,
        w_r_star: f.a.matmul_tn(&sol.h_e)?,
        lambda_star: sol.sigma.iter().map(|v| 1.0 / v).collect(),
    })
}

/// `params` with its `W_e`, `W_r`, `Λ` replaced by the stationary values.
pub fn stationary_head(params: &HeadParams, sp: &StationaryParams) -> Result<HeadParams> {
    HeadParams::new(
        params.projections.clone(),
        sp.w_e_star.clone(),
        sp.w_r_star.clone(),
        sp.lambda_star.iter().map(|&l| math::ln(l)).collect(),
        params.mode,
        params.causal,
    )
}

/// Primal e/r scores of a head carrying stationary parameters. When the
/// solution kept the head's own `s`, this is the ordinary forward pass;
/// otherwise the folded weights are applied against the kernel's `F_X`.
pub fn stationary_scores(
    x: &Matrix,
    params: &HeadParams,
    fmap: &FeatureMapSpec,
    sp: &StationaryParams,
) -> Result<(Matrix, Matrix)> {
    let head = stationary_head(params, sp)?;
    let s = head.s();
    if s == params.s() || params.mode == ProjectionMode::DataIndependent {
        let out = OutputMap {
            w_o: Matrix::zeros(1, 2 * s),
        };
        let o = primal_forward(x, &head, fmap, &out)?;
        Ok((o.e_scores, o.r_scores))
    } else {
        let fx = build_fx(x, params)?.fx;
        primal_scores_with_fx(x, &head, fmap, &fx)
    }
}

/// `Tr(H_eᵀ K H_r)`.
pub fn variance_objective(k: &Matrix, h_e: &Matrix, h_r: &Matrix) -> Result<f64> {
    Ok(h_e.matmul_tn(&k.matmul(h_r)?)?.trace())
}

/// An `n × s` matrix with orthonormal columns from Gram-Schmidt on a
/// Gaussian draw.
pub fn random_orthonormal(g: &mut rng::Rng, n: usize, s: usize) -> Matrix {
    assert!(s <= n, "cannot fit {s} orthonormal columns in dimension {n}");
    loop {
        let mut m = rng::normal_matrix(g, n, s);
        if orthonormalize(&mut m) {
            return m;
        }
    }
}

// Modified Gram-Schmidt in place; false if a column collapses.
fn orthonormalize(m: &mut Matrix) -> bool {
    let (n, s) = m.shape();
    for j in 0..s {
        for _ in 0..2 {
            for k in 0..j {
                let proj: f64 = (0..n).map(|i| m[(i, j)] * m[(i, k)]).sum();
                for i in 0..n {
                    m[(i, j)] -= proj * m[(i, k)];
                }
            }
        }
        let norm = math::sqrt((0..n).map(|i| m[(i, j)] * m[(i, j)]).sum());
        if norm < 1e-8 {
            return false;
        }
        for i in 0..n {
            m[(i, j)] /= norm;
        }
    }
    true
}

/// Closest matrix with orthonormal columns, `U Vᵀ` from the SVD `M = U S Vᵀ`.
pub fn polar_factor(m: &Matrix) -> Result<Matrix> {
    let res = svd(m, m.cols().min(m.rows()))?;
    res.u.matmul_nt(&res.v)
}

/// Alternating maximization of `Tr(H_eᵀ K H_r)`: each half-step replaces one
/// side with the polar factor of its optimal direction.
pub fn refine_variance(k: &Matrix, mut h_e: Matrix, mut h_r: Matrix, iters: usize) -> Result<(Matrix, Matrix)> {
    for _ in 0..iters {
        h_e = polar_factor(&k.matmul(&h_r)?)?;
        h_r = polar_factor(&k.matmul_tn(&h_e)?)?;
    }
    Ok((h_e, h_r))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, residual: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            residual,
            tolerance,
            pass: residual <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationReport {
    pub n: usize,
    pub s_requested: usize,
    pub s_used: usize,
    pub kernel_norm: f64,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failing(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Flip the sign of the largest entry of the first left singular vector
    /// before running the checks.
    pub corrupt: bool,
    pub seed: u64,
}

pub const SHIFTED_LEFT: &str = "shifted_eigenproblem_left";
pub const SHIFTED_RIGHT: &str = "shifted_eigenproblem_right";
pub const ORTHONORMALITY: &str = "orthonormality";
pub const RECONSTRUCTION: &str = "reconstruction";
pub const ZERO_OBJECTIVE: &str = "zero_objective";
pub const PRIMAL_DUAL_E: &str = "primal_dual_e";
pub const PRIMAL_DUAL_R: &str = "primal_dual_r";
pub const EQUAL_NORM: &str = "equal_norm";

/// Runs every stationarity check on one head.
pub fn verify_suite(x: &Matrix, params: &HeadParams, fmap: &FeatureMapSpec, s: usize) -> Result<VerificationReport> {
    verify_suite_with(x, params, fmap, s, VerifyOptions::default())
}

pub fn verify_suite_with(
    x: &Matrix,
    params: &HeadParams,
    fmap: &FeatureMapSpec,
    s: usize,
    opts: VerifyOptions,
) -> Result<VerificationReport> {
    let factors = kernel_factors(x, params, fmap)?;
    let k = factors.a.matmul_nt(&factors.b)?;
    let n = k.rows();
    let knorm = k.frobenius_norm();
    let mut sol = ksvd_solve(&k, s)?;
    if opts.corrupt {
        let col = sol.h_e.col(0);
        let i = (0..n).fold(0, |best, i| if col[i].abs() > col[best].abs() { i } else { best });
        sol.h_e[(i, 0)] = -sol.h_e[(i, 0)];
    }
    let sigma = &sol.sigma;
    let mut checks = Vec::new();

    let hs_e = sol.h_e.scale_cols(sigma)?;
    let hs_r = sol.h_r.scale_cols(sigma)?;
    let dual_e = k.matmul(&sol.h_r)?;
    let dual_r = k.matmul_tn(&sol.h_e)?;
    checks.push(Check::new(SHIFTED_LEFT, dual_e.distance(&hs_e), 1e-8 * knorm));
    checks.push(Check::new(SHIFTED_RIGHT, dual_r.distance(&hs_r), 1e-8 * knorm));

    let eye = Matrix::identity(sol.s());
    let ortho = sol
        .h_e
        .matmul_tn(&sol.h_e)?
        .distance(&eye)
        .max(sol.h_r.matmul_tn(&sol.h_r)?.distance(&eye));
    checks.push(Check::new(ORTHONORMALITY, ortho, 1e-8));

    let full = ksvd_solve(&k, n)?;
    let recon = full.h_e.scale_cols(&full.sigma)?.matmul_nt(&full.h_r)?;
    checks.push(Check::new(RECONSTRUCTION, k.distance(&recon), 1e-8 * knorm));

    let sp = stationary_from_factors(&sol, &factors)?;
    let (e, r) = stationary_scores(x, params, fmap, &sp)?;
    let j = ksvd_objective(&e, &r, &sp.w_e_star, &sp.w_r_star, &sp.lambda_star)?;
    checks.push(Check::new(ZERO_OBJECTIVE, j.abs(), 1e-8 * (1.0 + knorm)));
    checks.push(Check::new(PRIMAL_DUAL_E, e.max_abs_diff(&dual_e), 1e-8));
    checks.push(Check::new(PRIMAL_DUAL_R, r.max_abs_diff(&dual_r), 1e-8));

    checks.push(Check::new(EQUAL_NORM, equal_norm_residual(&k, &sol, opts.seed)?, 1e-9));

    Ok(VerificationReport {
        n,
        s_requested: s,
        s_used: sol.s(),
        kernel_norm: knorm,
        checks,
    })
}

// Largest gap between ‖h_e,l‖² and ‖h_r,l‖², over the normalized solution and
// over unnormalized solutions `h_r ← c h_r`, `h_e ← K h_r / σ` (relative to c²).
fn equal_norm_residual(k: &Matrix, sol: &KsvdSolution, seed: u64) -> Result<f64> {
    let mut g = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for l in 0..sol.s() {
        let he = sol.h_e.col(l);
        let hr = sol.h_r.col(l);
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        worst = worst.max((sq(&he) - sq(&hr)).abs());

        let c = rng::uniform(&mut g, 0.5, 2.0);
        let raw_r: Vec<f64> = hr.iter().map(|v| c * v).collect();
        let raw_e = k.matmul(&Matrix::column_vector(&raw_r))?.scale(1.0 / sol.sigma[l])?;
        worst = worst.max((sq(raw_e.as_slice()) - sq(&raw_r)).abs() / (c * c));
    }
    Ok(worst)
}

/// One case of a randomized verification grid.
#[derive(Debug, Clone)]
pub struct GridCase {
    pub x: Matrix,
    pub head: HeadParams,
    pub fmap: FeatureMapSpec,
    pub s: usize,
}

/// Draws a random non-causal head and input: `N` standard normal tokens of
/// width `d`, projections with entries of variance `1/d`, and standard normal
/// `W_e`, `W_r`.
pub fn random_case(
    g: &mut rng::Rng,
    n: usize,
    d: usize,
    s: usize,
    fmap: FeatureMapSpec,
    mode: ProjectionMode,
) -> Result<GridCase> {
    let x = rng::normal_matrix(g, n, d);
    let dq = fmap.input_dim();
    let scale = 1.0 / math::sqrt(d as f64);
    let proj = crate::features::ProjectionSet::new(
        rng::normal_matrix(g, dq, d).scale(scale)?,
        rng::normal_matrix(g, dq, d).scale(scale)?,
        None,
    )?;
    let rows = crate::attention::weight_rows(mode, false, fmap.output_dim(), s, n);
    let head = HeadParams::new(
        proj,
        rng::normal_matrix(g, rows, s),
        rng::normal_matrix(g, rows, s),
        vec![0.0; s],
        mode,
        false,
    )?;
    Ok(GridCase { x, head, fmap, s })
}

/// A deterministic verification grid of `count` cases cycling through both
/// projection modes, all three feature maps and the sequence lengths in
/// `ns`. Feature widths equal `d`, so every case is valid in both modes.
pub fn verification_grid(seed: u64, count: usize, ns: &[usize], d: usize, s: usize) -> Result<Vec<GridCase>> {
    if ns.is_empty() || d == 0 || s == 0 {
        return Err(Error::Config(
            "the grid needs sequence lengths and positive d and s".into(),
        ));
    }
    let mut g = rng::seeded(seed);
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let n = ns[i % ns.len()];
        let fmap = match (i / ns.len()) % 3 {
            0 => FeatureMapSpec::cosine(d),
            1 => FeatureMapSpec::identity(d),
            _ => FeatureMapSpec::random_exponential(d, d, rng::derive_seed(seed, i as u64)),
        };
        let mode = if (i / (3 * ns.len())).is_multiple_of(2) {
            ProjectionMode::DataIndependent
        } else {
            ProjectionMode::DataDependent {
                rank_multi: 1 + i % 3,
                subsample_seed: rng::derive_seed(seed, 1 << 32 | i as u64),
            }
        };
        cases.push(random_case(&mut g, n, d, s.min(n), fmap, mode)?);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ProjectionSet;

    fn eye_head(d: usize, s: usize, mode: ProjectionMode) -> HeadParams {
        let rows = crate::attention::weight_rows(mode, false, d, s, d);
        HeadParams::new(
            ProjectionSet::new(Matrix::identity(d), Matrix::identity(d), None).unwrap(),
            Matrix::zeros(rows, s),
            Matrix::zeros(rows, s),
            vec![0.0; s],
            mode,
            false,
        )
        .unwrap()
    }

    #[test]
    fn identity_inputs_give_identity_kernel() {
        let h = eye_head(2, 2, ProjectionMode::DataIndependent);
        let k = build_kernel(&Matrix::identity(2), &h, &FeatureMapSpec::cosine(2)).unwrap();
        assert_eq!(k, Matrix::identity(2));
    }

    #[test]
    fn equal_rows_give_all_ones() {
        let h = eye_head(3, 1, ProjectionMode::DataIndependent);
        let x = Matrix::from_fn(4, 3, |_, j| [1.0, -2.0, 0.5][j]);
        let k = build_kernel(&x, &h, &FeatureMapSpec::cosine(3)).unwrap();
        assert!(k.max_abs_diff(&Matrix::filled(4, 4, 1.0)) < 1e-15);
    }

    #[test]
    fn random_kernel_matches_double_loop_and_is_asymmetric() {
        let mut g = rng::seeded(11);
        let case = random_case(
            &mut g,
            4,
            3,
            2,
            FeatureMapSpec::cosine(3),
            ProjectionMode::DataIndependent,
        )
        .unwrap();
        let k = build_kernel(&case.x, &case.head, &case.fmap).unwrap();
        let q = case.x.matmul_nt(&case.head.projections.w_q).unwrap();
        let kk = case.x.matmul_nt(&case.head.projections.w_k).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (qi, kj) = (q.row(i), kk.row(j));
                let nq = crate::linalg::norm2(qi);
                let nk = crate::linalg::norm2(kj);
                let want: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (nq * nk);
                assert!((k[(i, j)] - want).abs() < 1e-12);
            }
        }
        assert!(k.distance(&k.transpose()) > 1e-3);
    }

    #[test]
    fn data_dependent_kernel_matches_double_loop() {
        let mut g = rng::seeded(12);
        let mode = ProjectionMode::DataDependent {
            rank_multi: 1,
            subsample_seed: 4,
        };
        let case = random_case(&mut g, 7, 3, 2, FeatureMapSpec::identity(3), mode).unwrap();
        let k = build_kernel(&case.x, &case.head, &case.fmap).unwrap();
        let fx = build_fx(&case.x, &case.head).unwrap().fx;
        assert_eq!(fx.rows(), 2);
        let q = case.x.matmul_nt(&case.head.projections.w_q).unwrap();
        let kk = case.x.matmul_nt(&case.head.projections.w_k).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let mut want = 0.0;
                for a in 0..2 {
                    let fa = fx.row(a);
                    want += crate::linalg::dot(fa, q.row(i)) * crate::linalg::dot(fa, kk.row(j));
                }
                assert!((k[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_small_kernels() {
        let sol = ksvd_solve(&Matrix::diag(&[2.0, 1.0]), 2).unwrap();
        assert_eq!(sol.sigma, vec![2.0, 1.0]);
        assert_eq!(sol.h_e, Matrix::identity(2));
        assert_eq!(sol.h_r, Matrix::identity(2));

        let shift = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let sol = ksvd_solve(&shift, 1).unwrap();
        assert_eq!(sol.sigma, vec![1.0]);
        assert_eq!(sol.h_e.as_slice(), &[1.0, 0.0]);
        assert_eq!(sol.h_r.as_slice(), &[0.0, 1.0]);

        let sol = ksvd_solve(&shift, 2).unwrap();
        assert!(sol.truncated);
        assert_eq!(sol.s(), 1);

        assert!(ksvd_solve(&shift, 3).is_err());
        assert!(ksvd_solve(&Matrix::zeros(2, 3), 1).is_err());
        assert!(matches!(
            ksvd_solve(&Matrix::zeros(3, 3), 1),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn identity_kernel_stationary_params() {
        let h = eye_head(3, 3, ProjectionMode::DataIndependent);
        let x = Matrix::identity(3);
        let fmap = FeatureMapSpec::cosine(3);
        let k = build_kernel(&x, &h, &fmap).unwrap();
        let sol = ksvd_solve(&k, 3).unwrap();
        let sp = stationary_params(&sol, &x, &h, &fmap).unwrap();
        assert_eq!(sp.w_e_star, Matrix::identity(3));
        assert_eq!(sp.w_r_star, Matrix::identity(3));
        assert_eq!(sp.lambda_star, vec![1.0; 3]);

        let rep = verify_suite(&x, &h, &fmap, 3).unwrap();
        for c in &rep.checks {
            assert_eq!(c.residual, 0.0, "{}", c.name);
        }
    }

    #[test]
    fn tiny_sigma_is_ill_conditioned() {
        let sol = KsvdSolution {
            h_e: Matrix::identity(2),
            h_r: Matrix::identity(2),
            sigma: vec![1.0, 1e-13],
            requested: 2,
            truncated: false,
        };
        let h = eye_head(2, 2, ProjectionMode::DataIndependent);
        let r = stationary_params(&sol, &Matrix::identity(2), &h, &FeatureMapSpec::cosine(2));
        assert!(matches!(r, Err(Error::IllConditioned { index: 1, .. })));
    }

    #[test]
    fn random_cases_pass_in_both_modes() {
        let mut g = rng::seeded(13);
        for mode in [
            ProjectionMode::DataIndependent,
            ProjectionMode::DataDependent {
                rank_multi: 2,
                subsample_seed: 5,
            },
        ] {
            for fmap in [
                FeatureMapSpec::cosine(4),
                FeatureMapSpec::identity(4),
                FeatureMapSpec::random_exponential(4, 4, 3),
            ] {
                let case = random_case(&mut g, 8, 4, 3, fmap, mode).unwrap();
                let rep = verify_suite(&case.x, &case.head, &case.fmap, case.s).unwrap();
                assert!(
                    rep.passed(),
                    "{mode:?} {:?}: {:?}",
                    case.fmap.kind(),
                    rep.failing().collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn corruption_is_localized() {
        let mut g = rng::seeded(14);
        let case = random_case(
            &mut g,
            8,
            4,
            3,
            FeatureMapSpec::cosine(4),
            ProjectionMode::DataIndependent,
        )
        .unwrap();
        let opts = VerifyOptions { corrupt: true, seed: 0 };
        let rep = verify_suite_with(&case.x, &case.head, &case.fmap, case.s, opts).unwrap();
        assert!(!rep.check(SHIFTED_LEFT).unwrap().pass);
        assert!(!rep.check(SHIFTED_RIGHT).unwrap().pass);
        assert!(rep.check(RECONSTRUCTION).unwrap().pass);
        assert!(rep.check(EQUAL_NORM).unwrap().pass);
    }

    #[test]
    fn causal_heads_are_rejected() {
        let mut h = eye_head(2, 2, ProjectionMode::DataIndependent);
        h.causal = true;
        assert!(build_kernel(&Matrix::identity(2), &h, &FeatureMapSpec::cosine(2)).is_err());
    }

    #[test]
    fn svd_maximizes_variance_objective() {
        let mut g = rng::seeded(15);
        for n in 2..=5 {
            let k = rng::normal_matrix(&mut g, n, n);
            for s in 1..=n {
                let sol = ksvd_solve(&k, s).unwrap();
                let best = variance_objective(&k, &sol.h_e, &sol.h_r).unwrap();
                assert!((best - sol.sigma.iter().sum::<f64>()).abs() < 1e-10);
                for _ in 0..50 {
                    let he = random_orthonormal(&mut g, n, s);
                    let hr = random_orthonormal(&mut g, n, s);
                    let (he, hr) = refine_variance(&k, he, hr, 3).unwrap();
                    assert!(variance_objective(&k, &he, &hr).unwrap() <= best + 1e-9);
                }
            }
        }
    }

    #[test]
    fn orthonormal_draws_are_orthonormal() {
        let mut g = rng::seeded(16);
        let q = random_orthonormal(&mut g, 6, 4);
        assert!(q.matmul_tn(&q).unwrap().distance(&Matrix::identity(4)) < 1e-13);
    }
}
