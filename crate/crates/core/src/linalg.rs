//! Small shared linear-algebra helpers on top of nalgebra: symmetric
//! eigendecompositions with a deterministic ordering and sign convention,
//! Cholesky wrappers, and the covariance regularization rule used across
//! the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a symmetric matrix is treated
/// as rank-deficient.
pub const RANK_EPS: f64 = 1e-10;

/// Regularization weight applied to near-singular within-class covariances:
/// `W + 1e-6 * trace(W)/d * I`.
pub const REG_LAMBDA: f64 = 1e-6;

/// Fix the sign of a vector so its largest-magnitude component is positive.
/// Ties resolve to the first occurrence, which keeps serialized transforms
/// byte-reproducible across runs.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending and the
/// sign convention applied to each eigenvector (returned as columns).
pub fn sym_eigen_asc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let d = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("non-finite eigenvalue")
    });
    let mut values = Vec::with_capacity(d);
    let mut vectors = DMatrix::zeros(d, d);
    for (j, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col = eig.eigenvectors.column(src).clone_owned();
        fix_sign(&mut col);
        vectors.set_column(j, &col);
    }
    (values, vectors)
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (mut values, mut vectors) = sym_eigen_asc(m);
    values.reverse();
    let d = values.len();
    let mut flipped = DMatrix::zeros(d, d);
    for j in 0..d {
        flipped.set_column(j, &vectors.column(d - 1 - j).clone_owned());
    }
    std::mem::swap(&mut vectors, &mut flipped);
    (values, vectors)
}

/// Number of eigenvalues above `RANK_EPS` relative to the largest.
pub fn spectral_rank(eigenvalues_desc: &[f64]) -> usize {
    let max = eigenvalues_desc.first().copied().unwrap_or(0.0).max(0.0);
    if max <= 0.0 {
        return 0;
    }
    eigenvalues_desc
        .iter()
        .take_while(|&&v| v > RANK_EPS * max)
        .count()
}

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::numeric(format!("{what} is not positive definite")))
}

/// Log-determinant of a PD matrix from its Cholesky factor.
pub fn logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
}

/// Quadratic form `x' M^-1 x` evaluated through the Cholesky factor of `M`
/// as the squared norm of the forward-substitution `L^-1 x`.
pub fn inv_quad(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    solve_lower(chol, x).norm_squared()
}

/// Forward substitution `L^-1 x` for the lower factor of `chol`.
pub fn solve_lower(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = x.clone();
    chol.l_dirty().solve_lower_triangular_mut(&mut y);
    y
}

/// Near-singularity check and in-place regularization of a symmetric PSD
/// matrix: when the smallest eigenvalue falls below `RANK_EPS` times the
/// largest, add `REG_LAMBDA * trace/d * I`. Returns whether the shift was
/// applied. The caller decides what to do if the matrix is still singular
/// (possible when the trace itself is zero).
pub fn regularize_covariance(m: &mut DMatrix<f64>) -> bool {
    let d = m.nrows();
    let (values, _) = sym_eigen_asc(m);
    let min = values[0];
    let max = values[d - 1];
    if min > RANK_EPS * max.max(0.0) && min > 0.0 {
        return false;
    }
    let shift = REG_LAMBDA * m.trace() / d as f64;
    for i in 0..d {
        m[(i, i)] += shift;
    }
    true
}

/// Arithmetic mean of the rows of a row-major `n x d` buffer.
pub fn row_mean(data: &[f64], n: usize, d: usize) -> DVector<f64> {
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mean[j] += data[i * d + j];
        }
    }
    mean / n as f64
}

/// `sum (x_i - mean)(x_i - mean)'` over row slices.
pub fn scatter<'a>(
    rows: impl Iterator<Item = &'a [f64]>,
    mean: &DVector<f64>,
    d: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    let mut centered = DVector::zeros(d);
    for row in rows {
        for j in 0..d {
            centered[j] = row[j] - mean[j];
        }
        out.ger(1.0, &centered, &centered, 1.0);
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
