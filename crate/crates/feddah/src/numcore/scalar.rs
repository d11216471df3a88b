//! Scalar abstraction for the numeric core.
//!
//! Everything in [`crate::numcore`] is generic over a floating-point scalar
//! so the same kernels run in `f32` or `f64`. The simulator itself pins
//! `f64` through the aliases at the crate root.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by tensors, tapes, and optimizers.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal or configuration value into the scalar type.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal converts to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
