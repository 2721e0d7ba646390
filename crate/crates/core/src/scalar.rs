//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by tensors, the autodiff tape and the network.
///
/// Implemented for `f32` (training, inference) and `f64` (gradient checks,
/// reference oracles).
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `ln(1 + e^x)` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        let zero = Self::zero();
        self.max(zero) + (-(self.abs())).exp().ln_1p()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        for x in [-800.0f64, -3.0, 0.0, 2.5, 800.0] {
            let s = x.sigmoid();
            assert!((s + (-x).sigmoid() - 1.0).abs() < 1e-15);
            assert!(s.is_finite());
        }
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for x in [-5.0f64, -0.3, 0.0, 1.7, 9.0] {
            assert!((x.softplus() - (1.0 + x.exp()).ln()).abs() < 1e-12);
        }
        assert!((1000.0f32).softplus().is_finite());
    }
}
