//! Scalar abstraction for bandwidth arithmetic.
//!
//! Bandwidth estimates are ratios of integer quantities (bytes, nanoseconds,
//! challenger counts). Floating point is the everyday choice; an exact
//! rational type makes the correction-factor identity hold without rounding.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// A number type usable for bandwidth estimates: `f32`, `f64` or an exact
/// rational such as `Ratio<i128>`.
pub trait Scalar: Num + Copy + PartialOrd + Debug + FromPrimitive + ToPrimitive {
    /// Lossless-enough conversion from an integer count.
    fn from_count(value: u64) -> Self {
        Self::from_u64(value).expect("count representable in scalar type")
    }

    /// Approximate value as `f64`, for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
impl Scalar for num_rational::Ratio<i128> {}
