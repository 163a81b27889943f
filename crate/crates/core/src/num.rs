//! Scalar abstraction for the geometric and kernel-regression core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the spatial core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Shorthand for converting an `f64` constant into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must be representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum<T>
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hypot_generic<T: Scalar>(a: T, b: T) -> T {
        (a * a + b * b).sqrt()
    }

    #[test]
    fn works_for_both_float_widths() {
        assert_eq!(hypot_generic(3.0f64, 4.0f64), 5.0);
        assert_eq!(hypot_generic(3.0f32, 4.0f32), 5.0);
        assert_eq!(f32::of(0.5), 0.5f32);
    }
}
