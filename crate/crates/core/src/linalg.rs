//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Scalar;

/// Eigenvalues of a symmetric matrix, sorted ascending.
pub fn sym_eigenvalues<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let eig = m.clone().symmetric_eigen();
    let mut vals: Vec<T> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals
}

pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt()
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn rel_frobenius_gap<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    frobenius(&(a - b)) / frobenius(b)
}

/// Largest entrywise deviation from symmetry.
pub fn asymmetry<T: Scalar>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse<T: Scalar>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Symmetric square root factor `F` with `F Fᵀ = m` for a positive
/// semidefinite `m`. Uses Cholesky when possible and falls back to the
/// eigen-decomposition with negative eigenvalues clamped to zero.
pub fn psd_factor<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    if let Some(c) = m.clone().cholesky() {
        return c.l();
    }
    let eig = m.clone().symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.max(T::zero()).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Spectral norm of a (not necessarily square) matrix.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    let gram = m.transpose() * m;
    sym_eigenvalues(&gram)
        .last()
        .copied()
        .unwrap_or_else(T::zero)
        .max(T::zero())
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_sorted() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        let v = sym_eigenvalues(&m);
        assert!((v[0] - 0.0f64).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn psd_factor_handles_singular() {
        let m = DMatrix::<f64>::zeros(2, 2);
        let f = psd_factor(&m);
        assert!(f.iter().all(|v| *v == 0.0));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&m);
        let back = &f * f.transpose();
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let m = DMatrix::from_row_slice(2, 3, &[3.0, 0.0, 0.0, 0.0, -4.0, 0.0]);
        assert!((spectral_norm(&m) - 4.0f64).abs() < 1e-12);
    }
}
