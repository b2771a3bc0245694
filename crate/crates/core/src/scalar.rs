//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// All model arithmetic is written against this trait. The Monte Carlo
/// harness and the CLI pin it to `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + FromStr + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Clamp into `[lo, hi]`. NaN propagates.
    #[inline]
    fn clamp_to(self, lo: Self, hi: Self) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn expit<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// `log(expit(x))`.
#[inline]
pub fn log_expit<T: Real>(x: T) -> T {
    // -softplus(-x)
    let neg = -x;
    -(neg.max(T::zero()) + (-neg.abs()).exp().ln_1p())
}

/// Evaluate `c[0] + c[1] w + ... + c[d] w^d` by Horner's rule.
#[inline]
pub fn horner<T: Real>(coef: &[T], w: T) -> T {
    coef.iter().rev().fold(T::zero(), |acc, &c| acc * w + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_symmetric_and_stable() {
        for &x in &[-800.0, -30.0, -1.0, 0.0, 0.5, 30.0, 800.0] {
            let p: f64 = expit(x);
            let q: f64 = expit(-x);
            assert!((p + q - 1.0).abs() < 1e-15);
            assert!(p.is_finite());
        }
        assert_eq!(expit(0.0f32), 0.5);
    }

    #[test]
    fn log_expit_matches_direct_form() {
        for &x in &[-5.0f64, -0.3, 0.0, 2.0, 9.0] {
            let direct = expit(x).ln();
            assert!((log_expit(x) - direct).abs() < 1e-14);
        }
        assert!((log_expit(-800.0f64) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn logit_inverts_expit() {
        for &p in &[1e-4f64, 0.2, 0.5, 0.9999] {
            assert!((expit(logit(p)) - p).abs() < 1e-15);
        }
    }

    #[test]
    fn horner_evaluates_polynomials() {
        assert_eq!(horner(&[1.0, 2.0, 3.0], 2.0), 17.0);
        assert_eq!(horner::<f64>(&[], 2.0), 0.0);
    }
}
