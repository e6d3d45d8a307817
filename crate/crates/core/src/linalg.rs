//! Small dense linear-algebra kernels used throughout the pipeline.
//!
//! Decompositions (Cholesky, symmetric eigen) are delegated to nalgebra;
//! triangular solves are written out directly so hot loops can run on
//! ndarray views without conversions. Matrices here are modest (feature
//! dimension up to ~60, i-vector rank up to a few hundred).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

fn to_nalgebra(a: ArrayView2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Lower Cholesky factor L of a symmetric positive-definite matrix, A = L·Lᵗ.
pub fn cholesky_lower(a: ArrayView2<f64>, context: &str) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{context}: Cholesky needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    match nalgebra::Cholesky::new(to_nalgebra(a)) {
        Some(chol) => Ok(from_nalgebra(&chol.l())),
        None => Err(Error::Numerical(format!(
            "{context}: matrix is not positive definite (Cholesky failed)"
        ))),
    }
}

/// Solve L·x = b for lower-triangular L by forward substitution.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let mut x = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[[i, j]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve Lᵗ·x = b for lower-triangular L by back substitution.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= l[[j, i]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve (L·Lᵗ)·x = b given the lower Cholesky factor.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, y.view())
}

/// Inverse of an SPD matrix from its lower Cholesky factor.
pub fn cholesky_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::zeros((n, n));
    let mut e = Array1::zeros(n);
    for k in 0..n {
        e[k] = 1.0;
        let col = cholesky_solve(l, e.view());
        inv.column_mut(k).assign(&col);
        e[k] = 0.0;
    }
    // Symmetrize to scrub solve roundoff.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

/// log det A for SPD A given its lower Cholesky factor.
pub fn cholesky_logdet(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
///
/// Returns `(values, vectors)` with eigenvectors in the columns of `vectors`,
/// permuted consistently with the sort.
pub fn symmetric_eigen_desc(a: ArrayView2<f64>, context: &str) -> Result<(Array1<f64>, Array2<f64>)> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{context}: eigendecomposition needs a square matrix"
        )));
    }
    let n = a.nrows();
    let sym = to_nalgebra(a);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Frobenius norm of a matrix.
pub fn frobenius_norm(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Force exact symmetry: (A + Aᵗ)/2, in place.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}
