//! Small dense linear-algebra helpers shared by the model code.
//!
//! Everything funnels through a Cholesky factor; explicit inverses are
//! reserved for test oracles.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// `view` names the matrix in the error when factorization fails.
pub fn cholesky_lower(m: &DMatrix<f64>, view: &str) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.unpack())
        .ok_or_else(|| Error::IllConditioned {
            view: view.to_string(),
        })
}

/// Solve `(L Lᵀ) x = b` for a single right-hand side.
pub fn chol_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    assert!(l.solve_lower_triangular_mut(&mut x));
    assert!(l.tr_solve_lower_triangular_mut(&mut x));
    x
}

/// Solve `(L Lᵀ) X = B` column-by-column.
pub fn chol_solve_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    assert!(l.solve_lower_triangular_mut(&mut x));
    assert!(l.tr_solve_lower_triangular_mut(&mut x));
    x
}

/// log |A| from the lower Cholesky factor of A.
pub fn logdet_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Dense inverse through the Cholesky factor.
pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    chol_solve_mat(l, &DMatrix::identity(n, n))
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// n×n matrix of pairwise squared distances between the rows of `x`.
pub fn pairwise_sq_dists(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for m in 0..x.ncols() {
                let diff = x[(i, m)] - x[(j, m)];
                s += diff * diff;
            }
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Ensure every entry of `m` is finite.
pub fn require_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
