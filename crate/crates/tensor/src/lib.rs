//! Deterministic reverse-mode automatic differentiation for small CPU models.
//!
//! Values live on a [`Tape`] that records every differentiable operation in
//! execution order; [`Tape::backward`] replays it in reverse. The engine is
//! generic over [`Real`] so the same graph code runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod par;
pub mod rng;
pub mod tape;
pub mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::finite_diff_check;
pub use rng::Rng;
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;

/// Floating point element type usable on a tape.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
