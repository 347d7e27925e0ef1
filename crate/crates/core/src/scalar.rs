//! Scalar abstraction: the numeric core is generic over `f32`/`f64`.
//!
//! Training runs in single precision; oracle and gradient-check tests
//! instantiate the same code at `f64`. Reductions always accumulate in
//! `f64` regardless of the working precision.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable throughout the crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 -> scalar")
    }

    fn from_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize -> scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar -> f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar -> f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Working precision of the training pipeline.
pub type Real = f32;
