//! Gauss–Legendre quadrature: fixed composite rules and adaptive bisection.
//!
//! All integrands in this crate are one-dimensional over the covariate
//! support, so a 10-point Gauss–Legendre panel with bisection on the panel
//! error is enough to hit `1e-10` absolute error on the smooth cases and
//! still terminate on integrands with kinks (clipped designs).

use crate::error::{Error, Result};
use crate::scalar::Real;

const DEFAULT_ORDER: usize = 10;
const MAX_DEPTH: usize = 48;

/// Nodes and weights of the `order`-point Gauss–Legendre rule on `[-1, 1]`,
/// nodes in ascending order.
pub fn gauss_legendre<T: Real>(order: usize) -> (Vec<T>, Vec<T>) {
    assert!(order >= 1, "quadrature order must be positive");
    let n = order;
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let pi = T::lit(std::f64::consts::PI);
    let nt = T::from_usize_lossy(n);
    let half = T::lit(0.5);
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess for the i-th largest root.
        let mut x = (pi * (T::from_usize_lossy(i + 1) - T::lit(0.25)) / (nt + half)).cos();
        let mut dp = T::one();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x = x - dx;
            if dx.abs() <= T::epsilon() * T::lit(4.0) {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = T::lit(2.0) / ((T::one() - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative<T: Real>(n: usize, x: T) -> (T, T) {
    let mut p0 = T::one();
    let mut p1 = x;
    for k in 2..=n {
        let kt = T::from_usize_lossy(k);
        let p2 = ((T::lit(2.0) * kt - T::one()) * x * p1 - (kt - T::one()) * p0) / kt;
        p0 = p1;
        p1 = p2;
    }
    let nt = T::from_usize_lossy(n);
    let d = nt * (x * p1 - p0) / (x * x - T::one());
    (p1, d)
}

/// Composite Gauss–Legendre rule with a fixed node set.
///
/// Used where the same nodes must be shared across many integrands, e.g. to
/// average a realized design over Monte Carlo replications before
/// integrating.
#[derive(Debug, Clone)]
pub struct FixedRule<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> FixedRule<T> {
    pub fn composite(lo: T, hi: T, panels: usize, order: usize) -> Self {
        assert!(panels >= 1 && hi > lo);
        let (x, w) = gauss_legendre::<T>(order);
        let width = (hi - lo) / T::from_usize_lossy(panels);
        let half = width * T::lit(0.5);
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let mid = lo + width * (T::from_usize_lossy(p) + T::lit(0.5));
            for (xi, wi) in x.iter().zip(&w) {
                nodes.push(mid + half * *xi);
                weights.push(half * *wi);
            }
        }
        FixedRule { nodes, weights }
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weighted sum of precomputed integrand values at [`Self::nodes`].
    pub fn apply(&self, values: &[T]) -> T {
        assert_eq!(values.len(), self.nodes.len());
        self.weights.iter().zip(values).fold(T::zero(), |acc, (w, v)| acc + *w * *v)
    }

    pub fn integrate<F: FnMut(T) -> T>(&self, mut f: F) -> T {
        self.nodes.iter().zip(&self.weights).fold(T::zero(), |acc, (x, w)| acc + *w * f(*x))
    }
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral<T> {
    pub value: T,
    pub abs_error: T,
    pub evaluations: usize,
}

struct Panel<T> {
    lo: T,
    hi: T,
    estimate: T,
    depth: usize,
}

/// Adaptive composite Gauss–Legendre integration of `f` over `[lo, hi]`.
///
/// A panel is accepted once the 10-point estimate on the panel and the sum
/// of the estimates on its two halves agree within the panel's share of
/// `abs_tol`. Returns `Error::Numerical` on a non-finite integrand value or
/// if bisection bottoms out before the tolerance is met.
pub fn integrate<T: Real, F: FnMut(T) -> T>(f: F, lo: T, hi: T, abs_tol: T) -> Result<Integral<T>> {
    integrate_with_order(f, lo, hi, abs_tol, DEFAULT_ORDER)
}

pub fn integrate_with_order<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    lo: T,
    hi: T,
    abs_tol: T,
    order: usize,
) -> Result<Integral<T>> {
    if !(hi >= lo) {
        return Err(Error::Usage(format!("integration bounds reversed: [{lo}, {hi}]")));
    }
    if hi == lo {
        return Ok(Integral { value: T::zero(), abs_error: T::zero(), evaluations: 0 });
    }
    let (x, w) = gauss_legendre::<T>(order);
    let mut evaluations = 0usize;
    let mut panel = |a: T, b: T, evals: &mut usize| -> Result<T> {
        let half = (b - a) * T::lit(0.5);
        let mid = a + half;
        let mut s = T::zero();
        for (xi, wi) in x.iter().zip(&w) {
            let v = f(mid + half * *xi);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite integrand at w = {}", mid + half * *xi)));
            }
            s = s + *wi * v;
        }
        *evals += x.len();
        Ok(s * half)
    };

    let total_width = hi - lo;
    let mut value = T::zero();
    let mut abs_error = T::zero();
    let first = panel(lo, hi, &mut evaluations)?;
    // Depth-first with the left half processed first keeps the summation order fixed.
    let mut stack = vec![Panel { lo, hi, estimate: first, depth: 0 }];
    while let Some(p) = stack.pop() {
        let mid = p.lo + (p.hi - p.lo) * T::lit(0.5);
        let left = panel(p.lo, mid, &mut evaluations)?;
        let right = panel(mid, p.hi, &mut evaluations)?;
        let refined = left + right;
        let err = (refined - p.estimate).abs();
        let local_tol = abs_tol * (p.hi - p.lo) / total_width;
        if err <= local_tol {
            value = value + refined;
            abs_error = abs_error + err;
        } else if p.depth >= MAX_DEPTH || (p.hi - p.lo) <= T::epsilon() * total_width {
            return Err(Error::Numerical(format!(
                "adaptive quadrature failed to reach tolerance {abs_tol:e} on [{}, {}]",
                p.lo, p.hi
            )));
        } else {
            stack.push(Panel { lo: mid, hi: p.hi, estimate: right, depth: p.depth + 1 });
            stack.push(Panel { lo: p.lo, hi: mid, estimate: left, depth: p.depth + 1 });
        }
    }
    Ok(Integral { value, abs_error, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_and_weights_are_exact_for_polynomials() {
        let (x, w) = gauss_legendre::<f64>(10);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // exact up to degree 19
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((int - 2.0 / 19.0).abs() < 1e-14);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn known_small_rules() {
        let (x, w) = gauss_legendre::<f64>(2);
        assert!((x[1] - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15);
        let (x, w) = gauss_legendre::<f64>(3);
        assert!(x[1].abs() < 1e-15);
        assert!((w[1] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_matches_closed_forms() {
        let r = integrate(|x: f64| x.exp(), 0.0, 3.0, 1e-12).unwrap();
        assert!((r.value - (3.0f64.exp() - 1.0)).abs() < 1e-11);
        let r = integrate(|x: f64| 1.0 / (1.0 + (-(2.0 * x + 1.0)).exp()), 0.0, 3.0, 1e-12).unwrap();
        // antiderivative of expit(2x+1) is ln(1+e^{2x+1})/2
        let exact = 0.5 * ((1.0 + 7.0f64.exp()).ln() - (1.0 + 1.0f64.exp()).ln());
        assert!((r.value - exact).abs() < 1e-11);
    }

    #[test]
    fn adaptive_handles_kinks() {
        let r = integrate(|x: f64| (x - 1.234).abs(), 0.0, 3.0, 1e-10).unwrap();
        let exact = 0.5 * 1.234f64.powi(2) + 0.5 * (3.0f64 - 1.234).powi(2);
        assert!((r.value - exact).abs() < 1e-10);
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        assert!(integrate(|x: f64| 1.0 / (x - x), 0.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn fixed_rule_integrates_smooth_functions() {
        let rule = FixedRule::<f64>::composite(0.0, 3.0, 16, 8);
        assert_eq!(rule.len(), 128);
        let v = rule.integrate(|x| x.sin());
        assert!((v - (1.0 - 3.0f64.cos())).abs() < 1e-13);
        let vals: Vec<f64> = rule.nodes().iter().map(|x| x * x).collect();
        assert!((rule.apply(&vals) - 9.0).abs() < 1e-13);
    }

    #[test]
    fn single_precision_rule() {
        let r = integrate(|x: f32| x * x, 0.0, 1.0, 1e-5).unwrap();
        assert!((r.value - 1.0 / 3.0).abs() < 1e-5);
    }
}
