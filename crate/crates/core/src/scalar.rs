use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`. Kernels that are sensitive to rounding
/// (diffusion, similarity search) widen to `f64` internally regardless of the
/// storage type.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn widen(self) -> f64 {
        self.to_f64().expect("finite scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
