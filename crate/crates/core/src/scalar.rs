//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into `S`.
#[inline]
pub fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 literal representable in scalar type")
}

/// Converts a count into `S`.
#[inline]
pub fn count<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count representable in scalar type")
}
