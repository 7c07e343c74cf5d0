//! Thin SVD for nalgebra matrices, computed with faer.

use faer::Mat;
use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage};

use crate::error::{Error, Result};

/// `A = U diag(s) Vᵀ` with `s` sorted in descending order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(a: &Matrix<f64, R, C, S>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn thin_svd<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(
    a: &Matrix<f64, R, C, S>,
) -> Result<ThinSvd> {
    let svd = to_faer(a)
        .thin_svd()
        .map_err(|_| Error::SingularSolve("SVD did not converge"))?;
    let s = svd.S().column_vector();
    Ok(ThinSvd {
        u: from_faer(svd.U()),
        s: DVector::from_fn(s.nrows(), |i, _| s[i]),
        v: from_faer(svd.V()),
    })
}

/// Singular values in descending order.
pub fn singular_values<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(
    a: &Matrix<f64, R, C, S>,
) -> Result<Vec<f64>> {
    to_faer(a)
        .singular_values()
        .map_err(|_| Error::SingularSolve("SVD did not converge"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_matrices_decompose_exactly() {
        for (m, n) in [(40, 25), (25, 40), (40, 40), (100, 3)] {
            let c = DMatrix::from_element(m, n, 1.0);
            let svd = thin_svd(&c).unwrap();
            assert!((svd.s[0] - ((m * n) as f64).sqrt()).abs() < 1e-9);
            let recon = &svd.u * DMatrix::from_diagonal(&svd.s) * svd.v.transpose();
            assert!((recon - &c).norm() < 1e-9);
            assert!((singular_values(&c).unwrap()[0] - svd.s[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn values_are_descending() {
        let a = DMatrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let s = thin_svd(&a).unwrap().s;
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }
}
