//! Scalar abstraction shared by the grid, power-flow and allocation code.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the generic numerical core.
///
/// Tolerances in the solvers are stated for `f64`; [`Real::tol`] rescales a
/// double-precision tolerance to the precision of the implementing type.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Scales an `f64` tolerance to this type's machine precision.
    fn tol(x: f64) -> Self {
        let scale = Self::default_epsilon().as_f64() / f64::EPSILON;
        Self::lit(x * scale)
    }

    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }

    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
