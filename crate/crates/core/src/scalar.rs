//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the solvers: `f32` or `f64`.
///
/// Archives and text formats are always written in `f64`; values are
/// converted on the way in and out.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Display + 'static
{
    /// Converts an `f64` literal. Infallible for the float types this is implemented for.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }

    #[inline]
    fn is_finite_val(self) -> bool {
        self.to_f64_lossy().is_finite()
    }

    /// Machine epsilon of the concrete type.
    fn epsilon_val() -> Self;
}

impl Real for f32 {
    fn epsilon_val() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn epsilon_val() -> Self {
        f64::EPSILON
    }
}
