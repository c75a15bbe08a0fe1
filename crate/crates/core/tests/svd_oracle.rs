use nalgebra::DMatrix;
use proptest::prelude::*;

use primal_attention::linalg::svd;
use primal_attention::{rng, Matrix};

fn to_nalgebra(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    let mut g = rng::seeded(2024);
    for _ in 0..50 {
        let a = rng::normal_matrix(&mut g, 6, 4);
        let r = svd(&a, 4).unwrap();
        let na = to_nalgebra(&a);
        let gram = na.transpose() * &na;
        let mut eig: Vec<f64> = gram
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        for (s, e) in r.sigma.iter().zip(&eig) {
            assert!((s - e).abs() <= 1e-9 * e.abs().max(1e-300), "{s} vs {e}");
        }
    }
}

#[test]
fn singular_values_match_nalgebra_svd() {
    let mut g = rng::seeded(7);
    for &(m, n) in &[(3, 3), (8, 5), (5, 8), (16, 16)] {
        let a = rng::normal_matrix(&mut g, m, n);
        let r = svd(&a, m.min(n)).unwrap();
        let mut other: Vec<f64> = to_nalgebra(&a).singular_values().iter().copied().collect();
        other.sort_by(|x, y| y.total_cmp(x));
        for (s, o) in r.sigma.iter().zip(&other) {
            assert!((s - o).abs() <= 1e-10 * r.sigma[0]);
        }
    }
}

fn orthonormality_error(m: &Matrix) -> f64 {
    m.matmul_tn(m).unwrap().distance(&Matrix::identity(m.cols()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_hold_for_random_matrices(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>(), scale in -6i32..6) {
        let mut g = rng::seeded(seed);
        let a = rng::normal_matrix(&mut g, rows, cols).scale(10f64.powi(scale)).unwrap();
        let k = rows.min(cols);
        let r = svd(&a, k).unwrap();
        let norm = a.frobenius_norm();
        prop_assert!(orthonormality_error(&r.u) <= 1e-10);
        prop_assert!(orthonormality_error(&r.v) <= 1e-10);
        prop_assert!(r.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.sigma.iter().all(|&s| s >= 0.0));
        let av = a.matmul(&r.v).unwrap();
        prop_assert!(av.distance(&r.u.scale_cols(&r.sigma).unwrap()) <= 1e-8 * norm);
        let atu = a.matmul_tn(&r.u).unwrap();
        prop_assert!(atu.distance(&r.v.scale_cols(&r.sigma).unwrap()) <= 1e-8 * norm);
        prop_assert!(r.reconstruct().distance(&a) <= 1e-8 * norm);
    }

    #[test]
    fn truncated_svd_is_a_prefix(rows in 2usize..8, cols in 2usize..8, seed in any::<u64>()) {
        let mut g = rng::seeded(seed);
        let a = rng::normal_matrix(&mut g, rows, cols);
        let full = svd(&a, rows.min(cols)).unwrap();
        let top = svd(&a, 1).unwrap();
        prop_assert!((top.sigma[0] - full.sigma[0]).abs() <= 1e-12 * full.sigma[0]);
    }
}
