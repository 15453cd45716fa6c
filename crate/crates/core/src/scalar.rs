//! Scalar abstraction shared by frequencies, nonconformity scores, thresholds
//! and risk levels.
//!
//! Everything score-valued in the crate is generic over [`Scalar`], which is
//! implemented for `f32`, `f64` and the exact [`Rational`](crate::Rational).
//! The rational instance makes frequencies (`f / M`), quantile ranks and
//! enumerated coverage exact.

use std::fmt::{Debug, Display};

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

pub trait Scalar:
    Num + Copy + PartialOrd + Debug + Display + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// `num / den` in this scalar type.
    fn ratio(num: usize, den: usize) -> Self;

    /// Smallest integer not below `self`. Floating instances snap values
    /// within a few ulps of an integer onto it, so `10 * (1 - 0.1)` is 9.
    fn ceil_to_usize(self) -> usize;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Conversion from a real in a bounded range (similarities, risk levels).
    fn from_real(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(|| panic!("{x} is not representable"))
    }
}

fn snapped_ceil<F: Float>(x: F) -> usize {
    let nearest = x.round();
    let slack = F::epsilon() * F::from(64.0).unwrap() * x.abs().max(F::one());
    let c = if (x - nearest).abs() <= slack {
        nearest
    } else {
        x.ceil()
    };
    c.max(F::zero()).to_usize().unwrap_or(usize::MAX)
}

impl Scalar for f64 {
    fn ratio(num: usize, den: usize) -> Self {
        num as f64 / den as f64
    }

    fn ceil_to_usize(self) -> usize {
        snapped_ceil(self)
    }
}

impl Scalar for f32 {
    fn ratio(num: usize, den: usize) -> Self {
        num as f32 / den as f32
    }

    fn ceil_to_usize(self) -> usize {
        snapped_ceil(self)
    }
}

impl Scalar for Ratio<i64> {
    fn ratio(num: usize, den: usize) -> Self {
        Ratio::new(num as i64, den as i64)
    }

    fn ceil_to_usize(self) -> usize {
        let c = self.ceil().to_integer();
        if c < 0 {
            0
        } else {
            c as usize
        }
    }
}
