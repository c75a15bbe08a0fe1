// One-sided (Hestenes) Jacobi SVD.
//
// Columns of a working copy of A are rotated pairwise until mutually
// orthogonal; the accumulated rotations form V, the column norms are the
// singular values and the normalized columns form U.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{dot, Matrix};
use crate::error::{Error, Result};
use crate::math;

/// Sweep cap is `SWEEP_FACTOR · max(rows, cols)`.
pub const SWEEP_FACTOR: usize = 10;

/// A column pair counts as orthogonal once `|⟨a,b⟩| ≤ tol·‖a‖‖b‖`.
pub const SWEEP_TOLERANCE: f64 = 1e-12;

/// Thin SVD `A ≈ U diag(σ) Vᵀ` truncated to the leading `k` triplets.
///
/// Each column of `u` has its largest-magnitude entry positive (first index
/// wins ties); the matching column of `v` is flipped with it.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.sigma)
            .and_then(|us| us.matmul_nt(&self.v))
            .expect("factor shapes are consistent")
    }
}

pub fn svd(a: &Matrix, k: usize) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let r = m.min(n);
    if k == 0 || k > r {
        return Err(Error::shape("svd", format!("k = {k} for a {m}x{n} matrix")));
    }
    let full = if m >= n {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    let mut out = SvdResult {
        u: full.u.leading_cols(k),
        sigma: full.sigma[..k].to_vec(),
        v: full.v.leading_cols(k),
    };
    fix_signs(&mut out);
    Ok(out)
}

// Requires rows ≥ cols. Returns all `cols` triplets sorted by σ descending.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let cap = SWEEP_FACTOR * m.max(n);
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == cap {
            return Err(Error::NoConvergence { sweeps });
        }
        sweeps += 1;
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= SWEEP_TOLERANCE * math::sqrt(alpha) * math::sqrt(beta) {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + math::hypot(1.0, zeta));
                let c = 1.0 / math::hypot(1.0, t);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| math::sqrt(dot(col, col))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_out = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        let col = if s > f64::MIN_POSITIVE {
            w[src].iter().map(|x| x / s).collect()
        } else {
            complete_basis(&u_cols, m)
        };
        u_cols.push(col);
        sigma.push(if s > f64::MIN_POSITIVE { s } else { 0.0 });
        for i in 0..n {
            v_out[(i, dst)] = v[src][i];
        }
    }
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    Ok(SvdResult { u, sigma, v: v_out })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

// A unit vector orthogonal to `basis`, from the first standard basis vector
// that survives two rounds of Gram-Schmidt.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for e in 0..m {
        let mut x = vec![0.0; m];
        x[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d = dot(&x, b);
                x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= d * bi);
            }
        }
        let nrm = math::sqrt(dot(&x, &x));
        if nrm > 1e-8 {
            x.iter_mut().for_each(|xi| *xi /= nrm);
            return x;
        }
    }
    unreachable!("basis of dimension < m always admits a completion")
}

fn fix_signs(res: &mut SvdResult) {
    let (m, k) = res.u.shape();
    for j in 0..k {
        let mut best = 0;
        for i in 1..m {
            if res.u[(i, j)].abs() > res.u[(best, j)].abs() {
                best = i;
            }
        }
        if res.u[(best, j)] < 0.0 {
            for i in 0..m {
                res.u[(i, j)] = -res.u[(i, j)];
            }
            for i in 0..res.v.rows() {
                res.v[(i, j)] = -res.v[(i, j)];
            }
        }
    }
}
