//! Scalar abstraction for the numeric core.
//!
//! Geometry and loss code is written against [`Scalar`] so it runs unchanged
//! on `f32` and `f64`. The growth law for class-balance weights only needs a
//! ring with division, so it gets the weaker [`Field`] bound and can also be
//! evaluated exactly on rationals.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Div, Mul, Sub};

use num_traits::{Float, FromPrimitive, NumAssign, One};

/// Floating-point scalar used throughout the geometry and loss modules.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Default + 'static {
    /// Lossy conversion from `f64`, for literals and tolerances.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Minimal bound for exact arithmetic: multiplication, subtraction, division
/// and a unit. Satisfied by floats and by `num_rational::Ratio`.
pub trait Field:
    Clone + One + Sub<Output = Self> + Div<Output = Self> + Mul<Output = Self>
{
}

impl<T> Field for T where
    T: Clone + One + Sub<Output = T> + Div<Output = T> + Mul<Output = T>
{
}

/// `base^exp` by binary exponentiation; exact for exact `T`.
pub fn powi<T: Field>(base: T, mut exp: u64) -> T {
    let mut result = T::one();
    let mut acc = base;
    while exp > 0 {
        if exp & 1 == 1 {
            result = result * acc.clone();
        }
        acc = acc.clone() * acc;
        exp >>= 1;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powi_matches_std_powi() {
        for e in 0..20u64 {
            let got = powi(1.5f64, e);
            let want = 1.5f64.powi(e as i32);
            assert!((got - want).abs() < 1e-12, "e={e}: {got} vs {want}");
        }
    }

    #[test]
    fn powi_zero_exponent_is_one() {
        assert_eq!(powi(0.0f64, 0), 1.0);
        assert_eq!(powi(7.0f32, 0), 1.0);
    }
}
