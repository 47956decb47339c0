//! Small dense linear-algebra helpers shared by the density and conjugate
//! update code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorisation that reports the eigenvalue spread of the input
/// when it fails.
pub fn cholesky(matrix: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if !matrix.is_square() {
        return Err(Error::Numerical {
            what,
            detail: format!(
                "matrix is {}x{}, not square",
                matrix.nrows(),
                matrix.ncols()
            ),
        });
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            what,
            detail: "matrix has non-finite entries".into(),
        });
    }
    Cholesky::new(matrix.clone()).ok_or_else(|| Error::Numerical {
        what,
        detail: condition_report(matrix),
    })
}

/// `log |A|` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Human readable eigenvalue summary for a (nominally) symmetric matrix.
pub fn condition_report(matrix: &DMatrix<f64>) -> String {
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    format!("not positive definite (eigenvalues in [{min:.3e}, {max:.3e}], condition {cond:.3e})")
}

/// Smallest eigenvalue of the symmetric part of `matrix`.
pub fn min_symmetric_eigenvalue(matrix: &DMatrix<f64>) -> f64 {
    if matrix.nrows() == 0 {
        return 0.0;
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn to_dvector(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}
