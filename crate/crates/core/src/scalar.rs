//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point element type of tensors, quantizers and optimizers: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Lossy conversion from an `f64` literal or sample.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Round half up: `floor(x + 1/2)`. Never banker's rounding.
    #[inline]
    fn round_half_up(self) -> Self {
        (self + Self::lit(0.5)).floor()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(0.5f64.round_half_up(), 1.0);
        assert_eq!((-0.5f64).round_half_up(), 0.0);
        assert_eq!(1.5f64.round_half_up(), 2.0);
        assert_eq!(2.5f64.round_half_up(), 3.0);
        assert_eq!((-1.5f32).round_half_up(), -1.0);
    }
}
