//! Floating point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Real scalar used for logits, descriptors and statistics: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumCast + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for both implementors.
    fn widen_f32(v: f32) -> Self;

    fn narrow_f32(self) -> f32;

    /// Converts a finite `f64` constant into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 literal fits every scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable as float")
    }
}

impl Scalar for f32 {
    #[inline]
    fn widen_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn narrow_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn narrow_f32(self) -> f32 {
        self as f32
    }
}

/// Sequential dot product.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Index of the largest value; the lowest index wins ties.
#[inline]
pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 0.5]), 1);
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
    }

    #[test]
    fn f32_widening_is_exact() {
        let v = 0.1f32;
        assert_eq!(<f64 as Scalar>::widen_f32(v) as f32, v);
    }
}
