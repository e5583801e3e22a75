//! Scalar abstraction for the numeric core.
//!
//! Everything under [`crate::tensor`], [`crate::tape`] and
//! [`crate::reference`] is generic over `Scalar` so the same kernels serve
//! f32 and f64. The experiment layers use the `f64` aliases at the crate
//! root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by the tensor and autodiff core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Conversion from an f64 hyperparameter or literal; never fails for
    /// f32/f64.
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal not representable")
    }

    /// Widening conversion used by reductions and reports.
    fn widen(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
