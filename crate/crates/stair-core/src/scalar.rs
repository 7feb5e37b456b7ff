//! Scalar abstraction over the floating-point element type.
//!
//! All core math is generic over [`Scalar`]; the crate root exports f64
//! aliases for the concrete types the training pipeline uses. Transcendental
//! functions are routed through `libm` in double precision so results are
//! bit-identical across platforms regardless of the system math library.

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar usable by tensors, losses, and the index.
pub trait Scalar:
    Float
    + NumCast
    + FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from f64 (identity for f64).
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 conversion")
    }

    /// Widening conversion to f64 (identity for f64).
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("to f64")
    }

    fn s_exp(self) -> Self {
        Self::from_f64(libm::exp(self.to_f64()))
    }

    fn s_ln(self) -> Self {
        Self::from_f64(libm::log(self.to_f64()))
    }

    /// ln(1 + x), accurate near zero.
    fn s_ln_1p(self) -> Self {
        Self::from_f64(libm::log1p(self.to_f64()))
    }

    /// Gauss error function.
    fn s_erf(self) -> Self {
        Self::from_f64(libm::erf(self.to_f64()))
    }

    fn s_sqrt(self) -> Self {
        Self::from_f64(libm::sqrt(self.to_f64()))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
