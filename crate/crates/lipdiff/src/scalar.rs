//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (schedule, autodiff graph, networks, metrics) is
//! generic over [`Scalar`]. Training runs in `f32`; the finite-difference
//! gradient checks and sampler oracles run in `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    /// Convert from `f64`, used for schedule constants and RNG draws so the
    /// random stream is identical across scalar types.
    fn from_f64c(v: f64) -> Self {
        Self::from(v).expect("f64 -> Scalar conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default scalar used by the CLI and training entry points.
pub type Real = f32;
