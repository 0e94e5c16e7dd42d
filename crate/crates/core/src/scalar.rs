//! Scalar abstraction shared by tensors, networks and losses.
//!
//! Production code runs on `f32`; the finite-difference gradient oracles in
//! the test suites run the same generic code on `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (the precision used for configuration values).
    fn of(value: f64) -> Self {
        <Self as NumCast>::from(value).expect("finite f64 fits the scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn of_f32(value: f32) -> Self {
        Self::of(value as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Floor applied inside logarithms and divisions.
pub const LOG_FLOOR: f64 = 1e-12;
