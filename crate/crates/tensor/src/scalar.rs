use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Element type of every tensor, volume and parameter in the workspace.
///
/// Implemented for `f32` (training and inference) and `f64` (gradient checks
/// and oracles that need the extra precision).
pub trait Scalar: NdFloat + FromPrimitive + ToPrimitive + Default + Sum {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
