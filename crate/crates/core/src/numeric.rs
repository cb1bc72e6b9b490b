//! Scalar abstraction shared by the single-precision training path and the
//! double-precision gradient-check path.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};

pub trait Float:
    LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + PartialOrd
    + 'static
{
    /// Additive stand-in for a blocked attention or similarity logit.
    const NEG_SENTINEL: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_float {
    ($t:ty) => {
        impl Float for $t {
            const NEG_SENTINEL: Self = -1e9;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_float!(f32);
impl_float!(f64);

/// Numerically stable in-place softmax over a row.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::NEG_SENTINEL * T::from_f64(10.0), Float::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `ln(sum(exp(row)))` computed with max subtraction.
pub fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row
        .iter()
        .copied()
        .fold(T::NEG_SENTINEL * T::from_f64(10.0), Float::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_distribution() {
        let mut row = [1.0f64, 2.0, 3.0, f64::NEG_SENTINEL];
        softmax_in_place(&mut row);
        assert_eq!(row[3], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let row = [0.5f64, -1.0, 2.0];
        let direct = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&row) - direct).abs() < 1e-14);
    }
}
