//! Eigendecomposition of general complex matrices and the matrix functions
//! built on it, `f(A) = V diag(f(lambda)) V^-1`.
//!
//! The eigendecomposition comes from `faer`.

use log::warn;

use crate::{linalg, CMatrix, Error, Result, C64};

/// Eigenvector condition above which a matrix is reported as defective.
pub const DEFECTIVE_COND: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct EigDecomposition {
    /// Unit-norm eigenvectors as columns.
    pub vectors: CMatrix,
    pub values: Vec<C64>,
    /// 2-norm condition number of `vectors`.
    pub cond_v: f64,
}

impl EigDecomposition {
    pub fn is_defective(&self) -> bool {
        !(self.cond_v <= DEFECTIVE_COND)
    }

    /// `V diag(f(lambda)) V^-1`, computed with a linear solve.
    pub fn apply(&self, f: impl Fn(C64) -> C64) -> Result<CMatrix> {
        let n = self.values.len();
        let mut vf = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            let fl = f(l);
            for i in 0..n {
                vf[(i, j)] *= fl;
            }
        }
        linalg::right_divide(&vf, &self.vectors).ok_or(Error::Defective { cond: f64::INFINITY })
    }
}

/// Eigendecomposition of a square complex matrix.
pub fn eig(a: &CMatrix) -> Result<EigDecomposition> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!("eig needs a square matrix, got {}x{}", n, a.ncols())));
    }
    if n == 0 {
        return Ok(EigDecomposition {
            vectors: CMatrix::zeros(0, 0),
            values: Vec::new(),
            cond_v: 1.0,
        });
    }
    if !linalg::all_finite(a) {
        return Err(Error::Dimension("eig input has non-finite entries".into()));
    }
    let e = linalg::to_faer(a)
        .eigen()
        .map_err(|_| Error::NoConvergence { iterations: 0 })?;
    let values: Vec<C64> = e.S().column_vector().iter().copied().collect();
    let mut vectors = linalg::from_faer(e.U());
    for mut col in vectors.column_iter_mut() {
        let nrm = col.norm();
        if nrm > 0.0 {
            col.unscale_mut(nrm);
        }
    }
    let cond_v = linalg::cond2(&vectors);
    if !(cond_v <= DEFECTIVE_COND) {
        warn!("eigenvector matrix is nearly singular (cond {cond_v:.3e}); input may be defective");
    }
    Ok(EigDecomposition { vectors, values, cond_v })
}

fn check_log_branch(values: &[C64]) -> Result<()> {
    for &l in values {
        let on_cut = l.norm() < 1e-300 || (std::f64::consts::PI - l.arg().abs()) < 1e-12;
        if on_cut {
            return Err(Error::BranchCut { value: l });
        }
    }
    Ok(())
}

/// Principal matrix logarithm; eigenvalue logs have imaginary part in (-pi, pi].
pub fn mat_log(a: &CMatrix) -> Result<CMatrix> {
    let e = eig(a)?;
    check_log_branch(&e.values)?;
    if e.is_defective() {
        return Err(Error::Defective { cond: e.cond_v });
    }
    e.apply(|l| l.ln())
}

/// Matrix exponential through the eigendecomposition.
pub fn mat_exp(a: &CMatrix) -> Result<CMatrix> {
    let e = eig(a)?;
    if e.is_defective() {
        return Err(Error::Defective { cond: e.cond_v });
    }
    e.apply(|l| l.exp())
}
