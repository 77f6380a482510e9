//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::DVector;

use crate::{CMatrix, C64};

/// Conditioning threshold above which a per-line matrix is treated as singular.
pub const SINGULAR_COND: f64 = 1e12;

/// Singular values in descending order; NaN when the SVD fails.
///
/// `nalgebra`'s SVD loses accuracy on some well-conditioned inputs, so the
/// factorization comes from `faer`.
pub fn singular_values(m: &CMatrix) -> DVector<f64> {
    match to_faer(m).singular_values() {
        Ok(s) => DVector::from_vec(s),
        Err(_) => DVector::from_element(m.nrows().min(m.ncols()), f64::NAN),
    }
}

pub fn all_finite(m: &CMatrix) -> bool {
    m.iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// 2-norm condition number; `f64::INFINITY` for singular or empty input.
pub fn cond2(m: &CMatrix) -> f64 {
    // SVD does not terminate on non-finite input.
    if m.is_empty() || !all_finite(m) {
        return f64::INFINITY;
    }
    let s = singular_values(m);
    let max = s.max();
    let min = s.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest singular value.
pub fn norm2(m: &CMatrix) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        singular_values(m).max()
    }
}

/// Solves `a * x = b` through an LU factorization.
pub fn solve(a: &CMatrix, b: &CMatrix) -> Option<CMatrix> {
    a.clone().lu().solve(b)
}

/// Solves `x * a = b` (right division `b / a`) without forming an inverse.
pub fn right_divide(b: &CMatrix, a: &CMatrix) -> Option<CMatrix> {
    a.transpose()
        .lu()
        .solve(&b.transpose())
        .map(|x| x.transpose())
}

/// Column-major `vec` of a matrix.
pub fn vec(m: &CMatrix) -> DVector<C64> {
    DVector::from_column_slice(m.as_slice())
}

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub solution: CMatrix,
    pub rank: usize,
    pub residual: CMatrix,
    /// Orthonormal basis of the numerical null space in column-scaled
    /// coordinates; a zero row means that unknown is determined.
    pub null_space: CMatrix,
}

/// Minimum-norm least-squares solution of `k * theta = rhs`.
///
/// Columns of `k` are scaled to unit norm before the SVD, and the numerical
/// rank counts singular values above `rank_tol * sigma_max`.
pub fn least_squares(k: &CMatrix, rhs: &CMatrix, rank_tol: f64) -> LeastSquares {
    let p = k.ncols();
    let failed = || LeastSquares {
        solution: CMatrix::zeros(p, rhs.ncols()),
        rank: 0,
        residual: rhs.clone(),
        null_space: CMatrix::identity(p, p),
    };
    if !all_finite(k) || !all_finite(rhs) {
        return failed();
    }
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let n = k.column(j).norm();
            if n > 0.0 && n.is_finite() {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut ks = k.clone();
    for (j, s) in scales.iter().enumerate() {
        ks.column_mut(j).unscale_mut(*s);
    }
    let Ok(svd) = to_faer(&ks).svd() else {
        return failed();
    };
    let sv: Vec<f64> = svd.S().column_vector().iter().map(|v| v.re).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let threshold = rank_tol * smax;
    let rank = sv.iter().filter(|&&s| s > threshold).count();
    let (u, v) = (from_faer(svd.U()), from_faer(svd.V()));
    // theta = V_r S_r^-1 U_r^H rhs
    let mut coeff = u.columns(0, rank).adjoint() * rhs;
    for (i, s) in sv.iter().take(rank).enumerate() {
        coeff.row_mut(i).unscale_mut(*s);
    }
    let mut solution = v.columns(0, rank) * coeff;
    for (j, s) in scales.iter().enumerate() {
        solution.row_mut(j).unscale_mut(*s);
    }
    let residual = rhs - k * &solution;
    LeastSquares {
        solution,
        rank,
        residual,
        null_space: v.columns(rank, p - rank).into_owned(),
    }
}

pub(crate) fn to_faer(m: &CMatrix) -> faer::Mat<C64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub(crate) fn from_faer(m: faer::MatRef<'_, C64>) -> CMatrix {
    CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(h: &CMatrix) -> Vec<f64> {
    to_faer(h)
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .unwrap_or_else(|_| vec![f64::NAN; h.nrows()])
}
