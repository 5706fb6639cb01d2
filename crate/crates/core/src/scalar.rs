//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Everything geometric in the crate is written against this trait. The
/// concrete aliases at the crate root pin it to `f64`, which is what the
/// tolerances in the tests assume.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default {
    /// Converts an `f64` literal into this type (rounding for `f32`).
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Deviation from orthonormality accepted for a rotation matrix.
    fn orthonormal_tolerance() -> Self;

    /// Relative threshold below which a singular value counts as zero.
    fn rank_tolerance() -> Self;

    #[inline]
    fn to_degrees(self) -> Self {
        self * Self::lit(180.0) / Self::pi()
    }

    #[inline]
    fn to_radians(self) -> Self {
        self * Self::pi() / Self::lit(180.0)
    }
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    fn orthonormal_tolerance() -> Self {
        1e-4
    }

    fn rank_tolerance() -> Self {
        1e-6
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn orthonormal_tolerance() -> Self {
        1e-9
    }

    fn rank_tolerance() -> Self {
        1e-12
    }
}
