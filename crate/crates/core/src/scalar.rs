//! Scalar abstraction for the numeric parts of the crate.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable in every tensor routine of the crate.
///
/// Implemented for `f32` and `f64`. Constants are obtained through
/// `num_traits::NumCast` (`T::from(x).unwrap()`), which is infallible for
/// the finite literals used here.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}
