//! Scalar abstraction for numeric code.
//!
//! Everything numeric is written once against [`Scalar`] and instantiated at
//! `f32` for training and `f64` for gradient checking. The trait is a thin
//! veneer over `num_traits::Float` with explicit conversions, so kernels stay
//! free of `as` casts.

use num_traits::Float;

pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn of_f64(x: f64) -> Self;
    fn of_usize(n: usize) -> Self;
    fn as_f64(self) -> f64;
    /// Bit width tag used only for diagnostics.
    const BITS: u32;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    const BITS: u32 = 32;
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    const BITS: u32 = 64;
}
