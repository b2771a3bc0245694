//! Data-generating scenarios and their population quantities.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quadrature;
use crate::scalar::{expit, Real};
use crate::trial::DesignFunction;

/// Absolute tolerance used for population integrals over the covariate law.
pub const ATE_QUADRATURE_TOL: f64 = 1e-10;

/// Conditional variance `Var(Y | A = a, W = w)` of a scenario.
///
/// Kept as a closed enum so designs that use the true variances (oracle
/// Neyman allocation) stay serializable.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceLaw<T> {
    /// `1 + 3 w^3` under treatment, `1 + 1.5 (3 - w)^3` under control.
    AppendixB,
    /// Arm-specific constants; zero is allowed for noiseless test scenarios.
    Constant { treated: T, control: T },
}

impl<T: Real> VarianceLaw<T> {
    pub fn variance(&self, a: u8, w: T) -> T {
        match self {
            VarianceLaw::AppendixB => {
                if a == 1 {
                    T::one() + T::lit(3.0) * w * w * w
                } else {
                    let r = T::lit(3.0) - w;
                    T::one() + T::lit(1.5) * r * r * r
                }
            }
            VarianceLaw::Constant { treated, control } => {
                if a == 1 {
                    *treated
                } else {
                    *control
                }
            }
        }
    }

    /// Conditional Neyman allocation `sd(1,w) / (sd(1,w) + sd(0,w))` for arm 1.
    /// Falls back to 1/2 when both arms are noiseless.
    pub fn neyman(&self, w: T) -> T {
        let s1 = self.variance(1, w).max(T::zero()).sqrt();
        let s0 = self.variance(0, w).max(T::zero()).sqrt();
        let tot = s1 + s0;
        if tot > T::zero() {
            s1 / tot
        } else {
            T::lit(0.5)
        }
    }

    pub(crate) fn encode(&self, out: &mut Vec<T>) {
        match self {
            VarianceLaw::AppendixB => out.push(T::zero()),
            VarianceLaw::Constant { treated, control } => {
                out.push(T::one());
                out.push(*treated);
                out.push(*control);
            }
        }
    }

    pub(crate) fn decode(params: &[T]) -> Result<(Self, usize)> {
        let code = params.first().ok_or_else(|| Error::Usage("missing variance law code".into()))?.as_f64();
        match code as i64 {
            0 => Ok((VarianceLaw::AppendixB, 1)),
            1 if params.len() >= 3 => Ok((VarianceLaw::Constant { treated: params[1], control: params[2] }, 3)),
            _ => Err(Error::Usage(format!("bad variance law encoding (code {code})"))),
        }
    }
}

/// Conditional mean `E[Y | A = a, W = w]`.
#[derive(Clone)]
pub enum MeanLaw<T> {
    /// `25 + 10 expit(2w + 1)` treated, `20 + 17.5 expit(w + 0.1)` control.
    AppendixB,
    /// Control mean of [`MeanLaw::AppendixB`], treated mean shifted by a constant.
    ConstantEffect {
        effect: T,
    },
    Custom(Arc<dyn Fn(u8, T) -> T + Send + Sync>),
}

impl<T: Real> MeanLaw<T> {
    pub fn mean(&self, a: u8, w: T) -> T {
        match self {
            MeanLaw::AppendixB => appendix_b_mean(a, w),
            MeanLaw::ConstantEffect { effect } => {
                let base = appendix_b_mean(0, w);
                if a == 1 {
                    base + *effect
                } else {
                    base
                }
            }
            MeanLaw::Custom(f) => f(a, w),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for MeanLaw<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanLaw::AppendixB => write!(f, "AppendixB"),
            MeanLaw::ConstantEffect { effect } => write!(f, "ConstantEffect({effect:?})"),
            MeanLaw::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

fn appendix_b_mean<T: Real>(a: u8, w: T) -> T {
    if a == 1 {
        T::lit(25.0) + T::lit(10.0) * expit(T::lit(2.0) * w + T::one())
    } else {
        T::lit(20.0) + T::lit(17.5) * expit(w + T::lit(0.1))
    }
}

/// Covariate law. Only a uniform law on a bounded interval is supported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateLaw<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> CovariateLaw<T> {
    pub fn uniform(lo: T, hi: T) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Usage(format!("uniform covariate law needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(CovariateLaw { lo, hi })
    }

    pub fn density(&self) -> T {
        T::one() / (self.hi - self.lo)
    }

    /// Map a uniform draw on `[0, 1)` into the support.
    pub fn from_uniform(&self, u: T) -> T {
        self.lo + (self.hi - self.lo) * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    Gaussian,
}

/// A complete data-generating distribution for one unit.
#[derive(Debug, Clone)]
pub struct Scenario<T> {
    pub name: String,
    pub mean: MeanLaw<T>,
    pub variance: VarianceLaw<T>,
    pub covariates: CovariateLaw<T>,
    pub noise: NoiseFamily,
}

impl<T: Real> Scenario<T> {
    /// The heteroskedastic logistic-mean scenario with `W ~ Uniform(0, 3)`.
    pub fn appendix_b() -> Self {
        Scenario {
            name: "appendix_b".into(),
            mean: MeanLaw::AppendixB,
            variance: VarianceLaw::AppendixB,
            covariates: CovariateLaw { lo: T::zero(), hi: T::lit(3.0) },
            noise: NoiseFamily::Gaussian,
        }
    }

    /// Default variances with a constant treatment effect.
    pub fn null_effect(effect: T) -> Self {
        Scenario { name: "null_effect".into(), mean: MeanLaw::ConstantEffect { effect }, ..Self::appendix_b() }
    }

    pub fn with_mean(mut self, mean: MeanLaw<T>) -> Self {
        self.mean = mean;
        self
    }

    pub fn with_variance(mut self, variance: VarianceLaw<T>) -> Self {
        self.variance = variance;
        self
    }

    pub fn with_covariates(mut self, covariates: CovariateLaw<T>) -> Self {
        self.covariates = covariates;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn qbar0(&self, a: u8, w: T) -> T {
        self.mean.mean(a, w)
    }

    #[inline]
    pub fn var0(&self, a: u8, w: T) -> T {
        self.variance.variance(a, w)
    }

    #[inline]
    pub fn cate(&self, w: T) -> T {
        self.qbar0(1, w) - self.qbar0(0, w)
    }

    pub fn support(&self) -> (T, T) {
        (self.covariates.lo, self.covariates.hi)
    }

    pub fn contains(&self, w: T) -> bool {
        w >= self.covariates.lo && w <= self.covariates.hi
    }

    pub fn sample_w<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u: f64 = rng.random();
        self.covariates.from_uniform(T::lit(u))
    }

    /// Outcome for a given standard-normal innovation `z`.
    pub fn outcome_from_normal(&self, a: u8, w: T, z: T) -> T {
        self.qbar0(a, w) + self.var0(a, w).max(T::zero()).sqrt() * z
    }

    /// Draw `Y ~ N(qbar0(a, w), var0(a, w))`.
    pub fn sample_outcome<R: Rng + ?Sized>(&self, a: u8, w: T, rng: &mut R) -> Result<T> {
        if !self.contains(w) {
            return Err(Error::Usage(format!(
                "covariate {w} outside support [{}, {}]",
                self.covariates.lo, self.covariates.hi
            )));
        }
        if a > 1 {
            return Err(Error::Usage(format!("treatment must be 0 or 1, got {a}")));
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(self.outcome_from_normal(a, w, T::lit(z)))
    }

    /// `E[qbar0(1, W) - qbar0(0, W)]` by adaptive quadrature.
    pub fn true_ate(&self) -> Result<T> {
        self.expect_over_w(|w| self.cate(w))
    }

    /// `E[f(W)]` under the covariate law.
    pub fn expect_over_w<F: FnMut(T) -> T>(&self, mut f: F) -> Result<T> {
        let dens = self.covariates.density();
        let (lo, hi) = self.support();
        let tol = T::lit(ATE_QUADRATURE_TOL).max(T::epsilon() * T::lit(64.0));
        let r = quadrature::integrate(|w| f(w) * dens, lo, hi, tol)?;
        Ok(r.value)
    }

    /// Oracle conditional Neyman allocation for arm 1 at `w`.
    pub fn oracle_neyman(&self, w: T) -> Result<T> {
        if !self.contains(w) {
            return Err(Error::Usage(format!("covariate {w} outside scenario support")));
        }
        Ok(self.variance.neyman(w))
    }
}

/// Multi-site generator: every unit is assigned a site, and the site's fixed
/// design randomizes its treatment. The outcome law ignores the site.
#[derive(Debug, Clone)]
pub struct MultisiteScenario<T> {
    pub scenario: Scenario<T>,
    sites: Vec<DesignFunction<T>>,
    cumulative: Vec<T>,
}

/// Build a multi-site generator on top of the default outcome law.
pub fn multisite_scenario<T: Real>(
    num_sites: usize,
    site_designs: Vec<DesignFunction<T>>,
    site_probs: &[T],
) -> Result<MultisiteScenario<T>> {
    if num_sites == 0 || site_designs.len() != num_sites || site_probs.len() != num_sites {
        return Err(Error::Usage(format!(
            "multisite: {num_sites} sites but {} designs and {} probabilities",
            site_designs.len(),
            site_probs.len()
        )));
    }
    if site_designs.iter().any(DesignFunction::is_contextual) {
        return Err(Error::Usage("multisite: site designs must be fixed functions of w".into()));
    }
    let mut acc = T::zero();
    let mut cumulative = Vec::with_capacity(num_sites);
    for &p in site_probs {
        if !(p >= T::zero()) {
            return Err(Error::Usage(format!("multisite: negative site probability {p}")));
        }
        acc = acc + p;
        cumulative.push(acc);
    }
    if (acc - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(16.0)) {
        return Err(Error::Usage(format!("multisite: site probabilities sum to {acc}, not 1")));
    }
    Ok(MultisiteScenario { scenario: Scenario::appendix_b().with_name("multisite"), sites: site_designs, cumulative })
}

impl<T: Real> MultisiteScenario<T> {
    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn with_scenario(mut self, scenario: Scenario<T>) -> Self {
        self.scenario = scenario;
        self
    }

    /// Site selected by a uniform draw on `[0, 1)`.
    pub fn site_for(&self, u: T) -> usize {
        let last = self.cumulative.len() - 1;
        self.cumulative.iter().position(|&c| u < c).unwrap_or(last).min(last)
    }

    pub fn site_design(&self, site: usize) -> &DesignFunction<T> {
        &self.sites[site]
    }

    /// Long-run average design `sum_j p_j g_j(1 | w)`.
    pub fn limit_design(&self, w: T) -> Result<T> {
        let mut prev = T::zero();
        let mut total = T::zero();
        for (d, &c) in self.sites.iter().zip(&self.cumulative) {
            total = total + (c - prev) * d.eval(w)?;
            prev = c;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn appendix_b_values() {
        let s = Scenario::<f64>::appendix_b();
        // 25 + 10 expit(1)
        let expected = 25.0 + 10.0 / (1.0 + (-1.0f64).exp());
        assert!((s.qbar0(1, 0.0) - expected).abs() < 1e-12);
        assert!((s.qbar0(1, 0.0) - 32.3106).abs() < 1e-4);
        assert_eq!(s.var0(0, 3.0), 1.0);
        assert_eq!(s.var0(1, 1.0), 4.0);
    }

    #[test]
    fn variances_are_at_least_one_on_support() {
        let s = Scenario::<f64>::appendix_b();
        for k in 0..=300 {
            let w = 3.0 * k as f64 / 300.0;
            assert!(s.var0(1, w) >= 1.0 && s.var0(0, w) >= 1.0);
        }
    }

    #[test]
    fn oracle_neyman_cases() {
        let s = Scenario::<f64>::appendix_b();
        let p = s.oracle_neyman(3.0).unwrap();
        let expected = 82f64.sqrt() / (82f64.sqrt() + 1.0);
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.9005).abs() < 1e-4);

        let eq = s.clone().with_variance(VarianceLaw::Constant { treated: 2.0, control: 2.0 });
        assert_eq!(eq.oracle_neyman(1.0).unwrap(), 0.5);
        let skew = s.clone().with_variance(VarianceLaw::Constant { treated: 9.0, control: 1.0 });
        assert!((skew.oracle_neyman(1.0).unwrap() - 0.75).abs() < 1e-15);
        assert!(s.oracle_neyman(3.5).is_err());
    }

    #[test]
    fn zero_noise_returns_mean_exactly() {
        let s = Scenario::<f64>::appendix_b().with_variance(VarianceLaw::Constant { treated: 0.0, control: 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in 0..2u8 {
            let y = s.sample_outcome(a, 1.3, &mut rng).unwrap();
            assert_eq!(y, s.qbar0(a, 1.3));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_checks_support() {
        let s = Scenario::<f64>::appendix_b();
        let a = s.sample_outcome(1, 2.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = s.sample_outcome(1, 2.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(matches!(s.sample_outcome(1, -0.1, &mut ChaCha8Rng::seed_from_u64(1)), Err(Error::Usage(_))));
    }

    #[test]
    fn outcome_moments_match_law() {
        let s = Scenario::<f64>::appendix_b();
        let mut rng = ChaCha8Rng::seed_from_u64(20240);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.sample_outcome(1, 1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - s.qbar0(1, 1.0)).abs() <= 4.0 * (4.0 / n as f64).sqrt());
        assert!((var - 4.0).abs() <= 0.05 * 4.0);
    }

    #[test]
    fn true_ate_trivial_cases() {
        let same = Scenario::<f64>::appendix_b().with_mean(MeanLaw::Custom(Arc::new(|_, w: f64| w.sin())));
        assert!(same.true_ate().unwrap().abs() < 1e-14);
        let c = Scenario::<f64>::null_effect(1.75);
        assert!((c.true_ate().unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn true_ate_matches_monte_carlo() {
        let s = Scenario::<f64>::appendix_b();
        let psi = s.true_ate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1_000_000;
        let vals: Vec<f64> = (0..n).map(|_| s.cate(s.sample_w(&mut rng))).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((psi - mean).abs() <= 3.0 * sd / (n as f64).sqrt(), "psi {psi} mc {mean}");
    }

    #[test]
    fn true_ate_invariant_to_common_shift() {
        let base = Scenario::<f64>::appendix_b();
        let shifted = base
            .clone()
            .with_mean(MeanLaw::Custom(Arc::new(|a, w: f64| appendix_b_mean(a, w) + 3.0 * w * w - (2.0 * w).cos())));
        assert!((base.true_ate().unwrap() - shifted.true_ate().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn multisite_validation_and_selection() {
        let d = |p| DesignFunction::constant(p).unwrap();
        assert!(multisite_scenario::<f64>(2, vec![d(0.2)], &[0.5, 0.5]).is_err());
        assert!(multisite_scenario::<f64>(2, vec![d(0.2), d(0.8)], &[0.5, 0.6]).is_err());
        let m = multisite_scenario::<f64>(2, vec![d(0.2), d(0.8)], &[1.0, 0.0]).unwrap();
        for k in 0..100 {
            assert_eq!(m.site_for(k as f64 / 100.0), 0);
        }
        let m = multisite_scenario::<f64>(2, vec![d(0.2), d(0.8)], &[0.5, 0.5]).unwrap();
        assert_eq!(m.site_for(0.49), 0);
        assert_eq!(m.site_for(0.5), 1);
        assert!((m.limit_design(1.0).unwrap() - 0.5).abs() < 1e-15);
    }
}
