//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar for matrices and parameters: `f32` or `f64`.
///
/// Reductions never accumulate in `Self`; they widen each term to `f64`
/// (see [`Scalar::wide`]) and narrow once at the end.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Display + Debug + Default + Send + Sync + 'static
{
    /// Widen to the accumulation type.
    #[inline]
    fn wide(self) -> f64 {
        self.to_f64().expect("finite scalar widens to f64")
    }

    /// Narrow from the accumulation type.
    #[inline]
    fn narrow(x: f64) -> Self {
        Self::from_f64(x).expect("f64 narrows to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
