use std::fmt;

use nalgebra::{DMatrix, DVector, RealField};
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the algorithms are written against.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type CMat<T> = DMatrix<Complex<T>>;
pub type CVec<T> = DVector<Complex<T>>;

#[cfg(test)]
#[inline]
pub(crate) fn cx<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

#[inline]
pub(crate) fn creal<T: Real>(re: T) -> Complex<T> {
    Complex::new(re, T::zero())
}

#[inline]
pub(crate) fn cabs<T: Real>(z: Complex<T>) -> T {
    z.norm_sqr().sqrt()
}
