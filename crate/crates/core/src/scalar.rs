use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Real scalar usable by every kernel in the crate: `f32` or `f64`.
pub trait Real:
    faer::traits::RealField
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal fits the scalar type")
    }

    #[inline]
    fn of(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("integer fits the scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Japanese bracket `(1 + x^2)^(1/2)`.
    #[inline]
    fn bracket(self) -> Self {
        (Self::one() + self * self).sqrt()
    }
}

impl Real for f32 {}
impl Real for f64 {}
