//! Small dense complex linear-algebra helpers shared by the algorithms.

use nalgebra::SymmetricEigen;
use num_complex::Complex;

use crate::scalar::{creal, CMat, CVec, Real};
use crate::{IveError, Result};

/// `(M + M^H) / 2`.
pub fn hermitian_part<T: Real>(m: &CMat<T>) -> CMat<T> {
    let half = creal(T::lit(0.5));
    (m + m.adjoint()) * half
}

/// Frobenius norm of `M^H M - I`.
pub fn unitarity_error<T: Real>(m: &CMat<T>) -> T {
    let n = m.ncols();
    (m.adjoint() * m - CMat::<T>::identity(n, n)).norm()
}

/// Ratio of the largest to the smallest singular value; infinity for a
/// singular (or empty-spectrum zero) matrix.
pub fn condition_number<T: Real>(m: &CMat<T>) -> T {
    if m.nrows() == 0 {
        return T::one();
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= T::zero() {
        T::max_value().unwrap_or_else(|| T::lit(f64::MAX))
    } else {
        max / min
    }
}

/// Solves `M x = b` by LU with partial pivoting.
pub fn solve<T: Real>(m: &CMat<T>, b: &CVec<T>) -> Option<CVec<T>> {
    if m.nrows() == 0 {
        return Some(b.clone());
    }
    m.clone().lu().solve(b)
}

pub fn invert<T: Real>(m: &CMat<T>) -> Result<CMat<T>> {
    m.clone()
        .try_inverse()
        .ok_or(IveError::RankDeficient(0.0))
}

/// `H^{p}` for a Hermitian positive definite `H`, by eigendecomposition.
///
/// Eigenvalues below `floor` are reported as rank deficiency.
pub fn hermitian_power<T: Real>(h: &CMat<T>, p: T, floor: T) -> Result<CMat<T>> {
    let eig = SymmetricEigen::new(hermitian_part(h));
    let min = eig.eigenvalues.min();
    if !(min > floor) {
        return Err(IveError::RankDeficient(min.as_f64().max(0.0).sqrt()));
    }
    let scaled = eig.eigenvalues.map(|l| creal(l.powf(p)));
    let v = &eig.eigenvectors;
    Ok(v * CMat::from_diagonal(&scaled) * v.adjoint())
}

/// Entrywise conjugate; a free function since
/// `conjugate()` on nalgebra matrices reads poorly in long expressions.
#[inline]
pub fn conj<T: Real>(m: &CMat<T>) -> CMat<T> {
    m.map(|z| z.conj())
}

/// `x^H y`.
#[inline]
pub fn inner<T: Real>(x: &CVec<T>, y: &CVec<T>) -> Complex<T> {
    x.dotc(y)
}

/// `x^H C x`.
pub fn quadratic_form<T: Real>(x: &CVec<T>, c: &CMat<T>) -> Complex<T> {
    x.dotc(&(c * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cx;

    fn sample() -> CMat<f64> {
        CMat::from_row_slice(
            3,
            3,
            &[
                cx(2.0, 0.0),
                cx(0.5, 0.25),
                cx(0.0, -0.3),
                cx(0.5, -0.25),
                cx(1.5, 0.0),
                cx(0.1, 0.0),
                cx(0.0, 0.3),
                cx(0.1, 0.0),
                cx(1.0, 0.0),
            ],
        )
    }

    #[test]
    fn inverse_square_root_squares_to_inverse() {
        let h = sample();
        let r = hermitian_power(&h, -0.5, 1e-12).unwrap();
        let back = &r * &r * &h;
        assert!((back - CMat::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn condition_of_identity_is_one() {
        let i = CMat::<f64>::identity(4, 4);
        assert!((condition_number(&i) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let z = CMat::<f64>::zeros(2, 2);
        assert!(hermitian_power(&z, -0.5, 1e-12).is_err());
        assert!(condition_number(&z) > 1e300);
    }
}
