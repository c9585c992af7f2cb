//! Small dense helpers for the symmetric matrices that appear throughout
//! (input covariance, effective covariance, their inverses and roots).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as singular.
pub const EIGEN_FLOOR: f64 = 1e-300;

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Eigendecomposition of a symmetric positive-definite matrix, failing when
/// the smallest eigenvalue is not above [`EIGEN_FLOOR`].
pub fn spd_eigen(m: &DMatrix<f64>, what: &'static str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > EIGEN_FLOOR) {
        return Err(Error::NotPositiveDefinite {
            what,
            min_eigenvalue: min,
        });
    }
    Ok(eig)
}

/// `f(M)` for symmetric positive-definite `M`, applied through the spectrum.
pub fn spd_function(m: &DMatrix<f64>, what: &'static str, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let eig = spd_eigen(m, what)?;
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let fj = f(ev);
        scaled.column_mut(j).scale_mut(fj);
    }
    let out = scaled * q.transpose();
    Ok(symmetrize(out))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    spd_function(m, what, |v| 1.0 / v)
}

pub fn spd_sqrt(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    spd_function(m, what, f64::sqrt)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_sqrt_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let inv = spd_inverse(&m, "m").unwrap();
        let root = spd_sqrt(&m, "m").unwrap();
        assert!((inv[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((root[(1, 1)] - 3.0).abs() < 1e-14);
        assert_eq!(spectral_norm_sym(&m), 9.0);
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            spd_inverse(&m, "m"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
