use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Scalar type a training run computes in. f32 for speed, f64 for tight
/// gradient checks.
pub trait Real:
    num_traits::Float
    + AddAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + Copy
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn from_f32_(x: f32) -> Self;
    fn to_f32_(self) -> f32;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64_(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32_(x: f32) -> Self {
        x
    }
    #[inline(always)]
    fn to_f32_(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64_(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32_(x: f32) -> Self {
        x as f64
    }
    #[inline(always)]
    fn to_f32_(self) -> f32 {
        self as f32
    }
}
