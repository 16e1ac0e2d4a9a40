use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the numerical core is generic over: `f32` or `f64`.
///
/// Transcendental functions come from [`RealField`]; conversions from
/// `num_traits`. Persisted formats always go through `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only if the value is unrepresentable.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(value: usize) -> Self {
        Self::lit(value as f64)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Smallest positive value treated as a non-degenerate variance.
    fn variance_floor() -> Self;

    fn epsilon() -> Self;
}

impl Real for f64 {
    fn variance_floor() -> Self {
        1e-10
    }

    fn epsilon() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    fn variance_floor() -> Self {
        1e-10
    }

    fn epsilon() -> Self {
        f32::EPSILON
    }
}
