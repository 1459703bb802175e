//! Scalar abstraction for the kernel and basis layers.
//!
//! Kernel evaluation and B-spline construction are written against [`Real`]
//! so they work for `f32` or `f64`. The estimation pipeline itself runs in
//! double precision; see the [`Scalar`] alias at the crate root.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: nalgebra::RealField + Float + FromPrimitive + Copy {
    /// Lossless-enough conversion from `f64` for kernel constants.
    fn from_f64_c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("constant conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
