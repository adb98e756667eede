//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Parameters live in [`Tensor`]s (always `f32`). A forward pass records its
//! operations on a [`Tape`], which is generic over the element type so the
//! same model code can be replayed in `f64` by the finite-difference checker.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use tape::{Tape, Var};
pub use tensor::{softmax_with_temperature, Tensor};

/// Floating-point element type a [`Tape`] can run on.
pub trait Element:
    num_traits::Float + AddAssign + MulAssign + SubAssign + Sum + Send + Sync + Debug + Default + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self {
        Self::of_f64(v as f64)
    }
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Element for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
