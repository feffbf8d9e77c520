//! Thin bridge between `ndarray` containers and `faer` kernels.
//!
//! All dense products, symmetric solves, and eigendecompositions in the crate
//! go through this module so numerical behavior is uniform: solves are
//! Cholesky with one jitter retry, eigendecompositions are for symmetric
//! matrices only, and failures surface as [`Error::Factorization`] carrying
//! the smallest eigenvalue.

use faer::prelude::*;
use faer::Side;
use faer_ext::{IntoFaer, IntoNdarray};
use ndarray::prelude::*;

use crate::{Error, Result};

/// Dense product `A·B`.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(
        a.ncols(),
        b.nrows(),
        "matmul: inner dimensions {} vs {}",
        a.ncols(),
        b.nrows()
    );
    let prod = a.into_faer() * b.into_faer();
    prod.as_ref().into_ndarray().to_owned()
}

/// Symmetric product `M·Mᵀ`, computed as a rank-k update: only the lower
/// triangle is formed, then mirrored, so the result is exactly symmetric and
/// the dominant cost is half that of a general product.
fn symmetric_scatter(m: ArrayView2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut out = Array2::zeros((n, n));
    faer::linalg::matmul::triangular::matmul(
        out.view_mut().into_faer(),
        faer::linalg::matmul::triangular::BlockStructure::TriangularLower,
        m.into_faer(),
        faer::linalg::matmul::triangular::BlockStructure::Rectangular,
        m.t().into_faer(),
        faer::linalg::matmul::triangular::BlockStructure::Rectangular,
        None,
        1.0,
        faer::get_global_parallelism(),
    );
    for i in 0..n {
        for j in i + 1..n {
            out[[i, j]] = out[[j, i]];
        }
    }
    out
}

/// `AᵀA` (Gram of the columns of `A`).
pub fn gram_of_columns(a: ArrayView2<f64>) -> Array2<f64> {
    symmetric_scatter(a.t())
}

/// `AAᵀ` (scatter of the columns of `A`).
pub fn scatter_of_columns(a: ArrayView2<f64>) -> Array2<f64> {
    symmetric_scatter(a)
}

/// Relative jitter added to the diagonal when a Cholesky factorization fails:
/// `JITTER_SCALE · trace/dim`, retried once.
pub const JITTER_SCALE: f64 = 1e-10;

/// Solve `M·X = RHS` for symmetric positive-definite `M`.
///
/// On factorization failure, adds `1e−10·trace/dim` to the diagonal and
/// retries once; if that also fails, returns [`Error::Factorization`] with
/// the smallest eigenvalue of `M`.
pub fn spd_solve(m: &Array2<f64>, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
    debug_assert_eq!(m.nrows(), m.ncols());
    assert_eq!(
        m.ncols(),
        rhs.nrows(),
        "spd_solve: matrix is {}×{} but rhs has {} rows",
        m.nrows(),
        m.ncols(),
        rhs.nrows()
    );
    let mf = m.view().into_faer();
    if let Ok(ch) = mf.cholesky(Side::Lower) {
        let sol = ch.solve(rhs.into_faer());
        return Ok(sol.as_ref().into_ndarray().to_owned());
    }
    // Jitter retry: degenerate traces can make nearly-PSD systems fail at
    // extreme damping values.
    let dim = m.nrows();
    let jitter = JITTER_SCALE * trace(m) / dim as f64;
    let mut mj = m.clone();
    for i in 0..dim {
        mj[[i, i]] += jitter;
    }
    match mj.view().into_faer().cholesky(Side::Lower) {
        Ok(ch) => {
            let sol = ch.solve(rhs.into_faer());
            Ok(sol.as_ref().into_ndarray().to_owned())
        }
        Err(_) => {
            let (vals, _) = eigh(m);
            let smallest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            Err(Error::Factorization {
                smallest_pivot: smallest,
            })
        }
    }
}

/// Solve `M·x = rhs` for a single right-hand side.
pub fn spd_solve_vec(m: &Array2<f64>, rhs: ArrayView1<f64>) -> Result<Array1<f64>> {
    let col = rhs
        .to_owned()
        .into_shape((rhs.len(), 1))
        .expect("column reshape");
    let sol = spd_solve(m, col.view())?;
    Ok(sol.column(0).to_owned())
}

/// Inverse of the damped symmetric matrix `M + damping·I`.
pub fn damped_inverse(m: &Array2<f64>, damping: f64) -> Result<Array2<f64>> {
    let dim = m.nrows();
    let mut md = m.clone();
    for i in 0..dim {
        md[[i, i]] += damping;
    }
    spd_solve(&md, Array2::eye(dim).view())
}

/// Eigendecomposition of a symmetric matrix: `(values, vectors)` with
/// eigenvectors in the columns. No ordering is guaranteed.
pub fn eigh(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    debug_assert_eq!(m.nrows(), m.ncols());
    let evd = m
        .view()
        .into_faer()
        .selfadjoint_eigendecomposition(Side::Lower);
    let vals = evd.s().column_vector();
    let values = Array1::from_iter((0..m.nrows()).map(|i| vals[i]));
    let vectors = evd.u().into_ndarray().to_owned();
    (values, vectors)
}

/// Sum of diagonal entries.
pub fn trace(m: &Array2<f64>) -> f64 {
    m.diag().sum()
}

/// Frobenius norm.
pub fn frob_norm(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest absolute entry (0 for empty input).
pub fn max_abs(m: ArrayView2<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Spectral norm of a symmetric matrix (largest |eigenvalue|).
pub fn sym_spectral_norm(m: &Array2<f64>) -> f64 {
    let (vals, _) = eigh(m);
    vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected}, got {actual} (tol {tol})"
        );
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let c = matmul(a.view(), b.view());
        assert_eq!(c, array![[19.0, 22.0], [43.0, 50.0]]);
    }

    #[test]
    fn matmul_accepts_transposed_views() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let c = matmul(a.t(), a.view());
        // AᵀA of a 2×3 matrix is 3×3 and symmetric.
        assert_eq!(c.dim(), (3, 3));
        for i in 0..3 {
            for j in 0..3 {
                assert_close(c[[i, j]], c[[j, i]], 0.0);
            }
        }
        assert_close(c[[0, 0]], 17.0, 1e-14);
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let m = array![[4.0, 1.0], [1.0, 3.0]];
        let x_true = array![2.0, -1.0];
        let rhs = m.dot(&x_true);
        let x = spd_solve_vec(&m, rhs.view()).unwrap();
        for i in 0..2 {
            assert_close(x[i], x_true[i], 1e-12);
        }
    }

    #[test]
    fn spd_solve_reports_smallest_pivot_on_indefinite_input() {
        let m = array![[1.0, 0.0], [0.0, -2.0]];
        match spd_solve(&m, Array2::eye(2).view()) {
            Err(Error::Factorization { smallest_pivot }) => {
                assert_close(smallest_pivot, -2.0, 1e-10);
            }
            other => panic!("expected factorization error, got {other:?}"),
        }
    }

    #[test]
    fn damped_inverse_is_inverse() {
        let m = array![[2.0, 1.0], [1.0, 2.0]];
        let inv = damped_inverse(&m, 0.5).unwrap();
        let mut md = m.clone();
        md[[0, 0]] += 0.5;
        md[[1, 1]] += 0.5;
        let prod = matmul(md.view(), inv.view());
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_close(prod[[i, j]], expect, 1e-12);
            }
        }
    }

    #[test]
    fn eigh_reconstructs_the_matrix() {
        let m = array![[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 1.0]];
        let (vals, vecs) = eigh(&m);
        // Q Λ Qᵀ = M
        let lam = Array2::from_diag(&vals);
        let rec = matmul(matmul(vecs.view(), lam.view()).view(), vecs.t());
        for i in 0..3 {
            for j in 0..3 {
                assert_close(rec[[i, j]], m[[i, j]], 1e-12);
            }
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = array![[2.0, 0.0], [0.0, -5.0]];
        assert_close(sym_spectral_norm(&m), 5.0, 1e-12);
    }
}
