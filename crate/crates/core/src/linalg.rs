use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `A x = b` for a symmetric positive definite `A` given row-major.
pub(crate) fn solve_spd(matrix: &[f64], dim: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(matrix.len(), dim * dim);
    debug_assert_eq!(rhs.len(), dim);
    let a = DMatrix::from_row_slice(dim, dim, matrix);
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(x.as_slice().to_vec())
}
