//! Scalar abstraction so the whole stack runs in either precision.
//!
//! `f64` is for finite-difference gradient checks, `f32` for training. All
//! numeric code is written against [`Scalar`] and monomorphizes to plain
//! float loops.

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Sum
    + Copy
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, used for constants and RNG draws.
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any scalar")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<S: Scalar>(xs: &[S]) -> S {
        xs.iter().copied().sum()
    }

    #[test]
    fn both_precisions_satisfy_the_trait() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0);
        assert_eq!(f32::from_f64_c(0.5), 0.5f32);
        assert_eq!(2.5f64.to_f64_c(), 2.5);
    }
}
