//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for embeddings, gradients and optimizer state.
///
/// Implemented for `f32` and `f64`. Gradient checks and the on-disk formats
/// use `f64`; `f32` is available for cheaper training runs.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `ln(1 + e^x)` without overflow for large `|x|`.
    fn softplus(self) -> Self {
        let zero = Self::zero();
        self.max(zero) + (-self.abs()).exp().ln_1p()
    }

    /// Logistic function, evaluated on the side that cannot overflow.
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product of two equally sized slices.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(1000.0f64.softplus(), 1000.0);
        assert!((-1000.0f64).softplus() >= 0.0);
        assert!(((0.0f64).softplus() - 2f64.ln()).abs() < 1e-15);
        assert!((800.0f32).softplus().is_finite());
    }

    #[test]
    fn sigmoid_matches_definition() {
        for &x in &[-30.0f64, -2.5, 0.0, 0.3, 17.0] {
            let direct = 1.0 / (1.0 + (-x).exp());
            assert!((x.sigmoid() - direct).abs() < 1e-15);
        }
        assert_eq!((-1e4f64).sigmoid(), 0.0);
    }
}
