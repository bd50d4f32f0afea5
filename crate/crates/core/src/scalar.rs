//! Scalar abstraction for the closed-form schedule math.
//!
//! The warp and noise-algebra functions are ordinary real-valued formulas, so
//! they are written once over a float trait and instantiated at `f32`/`f64`.
//! Pipeline code uses the concrete aliases at the crate root.

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar usable by the schedule formulas.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Copy + Default + std::fmt::Debug + std::fmt::Display
{
    /// Lossy conversion from `f64`, for mixing literals into generic code.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }
}

impl<T> Scalar for T where
    T: Float + FloatConst + FromPrimitive + Copy + Default + std::fmt::Debug + std::fmt::Display
{
}
