//! Design policies: rules mapping the data accumulated so far to the next
//! unit's treatment randomization function.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::dgp::VarianceLaw;
use crate::error::{Error, Result};
use crate::learners::{fit_cate_dr, fit_conditional_variance, fit_outcome_regression, LearnerConfig, OutcomeModel};
use crate::scalar::Real;
use crate::trial::{BenefitRule, DesignFunction, GbarStep, NeymanRule, SdSource, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignKind {
    NonAdaptive,
    StandardNeyman,
    GbarDriven,
    OracleNeyman,
    BenefitDriven,
}

impl DesignKind {
    pub fn label(self) -> &'static str {
        match self {
            DesignKind::NonAdaptive => "non_adaptive",
            DesignKind::StandardNeyman => "standard_neyman",
            DesignKind::GbarDriven => "gbar_driven",
            DesignKind::OracleNeyman => "oracle_neyman",
            DesignKind::BenefitDriven => "benefit_driven",
        }
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_adaptive" => Ok(DesignKind::NonAdaptive),
            "standard_neyman" => Ok(DesignKind::StandardNeyman),
            "gbar_driven" => Ok(DesignKind::GbarDriven),
            "oracle_neyman" => Ok(DesignKind::OracleNeyman),
            "benefit_driven" => Ok(DesignKind::BenefitDriven),
            other => Err(Error::Config(format!("unknown design kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig {
    pub kind: DesignKind,
    /// Burn-in size; units `1..=n0` are randomized at `baseline_prob`.
    pub n0: usize,
    pub baseline_prob: f64,
    /// Half-width of the smooth region of the benefit tilt.
    pub b: f64,
    /// Clip bound for standard Neyman probabilities, `[clip_lo, 1 - clip_lo]`.
    pub clip_lo: f64,
    /// Units between refits of the nuisance models.
    pub refit_stride: usize,
    /// Units per step of the benefit design's `nu` schedule.
    pub nu_period: usize,
    /// Use the scenario's true variances instead of fitted ones for
    /// Neyman-based adaptive designs.
    pub oracle_variance: bool,
    pub learner: LearnerConfig,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            kind: DesignKind::NonAdaptive,
            n0: 1000,
            baseline_prob: 0.5,
            b: 1.0,
            clip_lo: 0.01,
            refit_stride: 250,
            nu_period: 250,
            oracle_variance: false,
            learner: LearnerConfig::default(),
        }
    }
}

impl DesignConfig {
    pub fn with_kind(kind: DesignKind) -> Self {
        DesignConfig { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.baseline_prob) {
            return Err(Error::Config(format!("design.baseline_prob must be in [0, 1], got {}", self.baseline_prob)));
        }
        if !(self.b > 0.0) {
            return Err(Error::Config(format!("design.b must be positive, got {}", self.b)));
        }
        if !(0.0..0.5).contains(&self.clip_lo) {
            return Err(Error::Config(format!("design.clip_lo must be in [0, 0.5), got {}", self.clip_lo)));
        }
        if self.refit_stride == 0 || self.nu_period == 0 {
            return Err(Error::Config("design.refit_stride and design.nu_period must be positive".into()));
        }
        Ok(())
    }

    fn needs_oracle(&self) -> bool {
        self.kind == DesignKind::OracleNeyman
            || (self.oracle_variance && matches!(self.kind, DesignKind::StandardNeyman | DesignKind::GbarDriven))
    }

    /// Label used in reports; oracle-variance variants get an `oracle_var_` prefix.
    pub fn label(&self) -> String {
        if self.oracle_variance && matches!(self.kind, DesignKind::StandardNeyman | DesignKind::GbarDriven) {
            format!("oracle_var_{}", self.kind)
        } else {
            self.kind.label().to_string()
        }
    }
}

/// Smooth tilt `Gamma_{nu,b}` from an estimated CATE to a treatment probability in `[nu, 1 - nu]`.
///
/// The boundary points `x = +-b` belong to the constant pieces; the cubic
/// meets them continuously there.
pub fn gamma_blend<T: Real>(x: T, nu: T, b: T) -> Result<T> {
    if !(nu >= T::zero() && nu <= T::lit(0.5)) {
        return Err(Error::Usage(format!("gamma_blend: nu must be in [0, 0.5], got {nu}")));
    }
    if !(b > T::zero()) {
        return Err(Error::Usage(format!("gamma_blend: b must be positive, got {b}")));
    }
    Ok(gamma_blend_unchecked(x, nu, b))
}

pub(crate) fn gamma_blend_unchecked<T: Real>(x: T, nu: T, b: T) -> T {
    if x <= -b {
        nu
    } else if x >= b {
        T::one() - nu
    } else {
        let c = T::lit(0.5) - nu;
        -(c / (T::lit(2.0) * b * b * b)) * x * x * x + c / (T::lit(2.0) * b / T::lit(3.0)) * x + T::lit(0.5)
    }
}

/// `nu_i = exp(-ceil((i - n0) / period))` for the 1-based unit index `i > n0`.
pub fn nu_schedule<T: Real>(unit: usize, n0: usize, period: usize) -> T {
    let t = unit.saturating_sub(n0).div_ceil(period);
    T::lit(-(t as f64)).exp()
}

/// `clip((i + 1) target - i gbar_i, 0, 1)`: the next design that moves the
/// average design onto `target`.
pub fn gbar_driven_value<T: Real>(i: usize, target: T, gbar_i: T) -> T {
    (T::from_usize_lossy(i + 1) * target - T::from_usize_lossy(i) * gbar_i).clamp_to(T::zero(), T::one())
}

/// Fit the outcome mean and the conditional variance on `traj` and return the
/// plug-in Neyman allocation, clipped to `[clip_lo, 1 - clip_lo]`.
pub fn standard_neyman_rule<T: Real>(
    traj: &Trajectory<T>,
    learner: &LearnerConfig,
    clip_lo: T,
) -> Result<NeymanRule<T>> {
    let mean = fit_outcome_regression(traj, learner.degree)?;
    let var = fit_conditional_variance(traj, &mean, learner.degree, T::lit(learner.var_floor))?;
    Ok(NeymanRule { source: SdSource::Fitted(var), clip_lo, clip_hi: T::one() - clip_lo })
}

/// CATE model from doubly robust pseudo-outcomes on `traj`.
pub fn fit_benefit_cate<T: Real>(traj: &Trajectory<T>, learner: &LearnerConfig) -> Result<OutcomeModel<T>> {
    let mean = fit_outcome_regression(traj, learner.degree)?;
    fit_cate_dr(traj, &mean, learner.degree)
}

/// Stateful design policy. One instance drives one experiment.
#[derive(Debug, Clone)]
pub struct DesignPolicy<T> {
    cfg: DesignConfig,
    oracle: Option<VarianceLaw<T>>,
    last_fit: Option<usize>,
    neyman: Option<Arc<NeymanRule<T>>>,
    cate: Option<OutcomeModel<T>>,
    benefit: Option<Arc<BenefitRule<T>>>,
}

impl<T: Real> DesignPolicy<T> {
    /// `oracle` gives the true variances; required by the oracle kinds.
    pub fn new(cfg: DesignConfig, oracle: Option<VarianceLaw<T>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.needs_oracle() && oracle.is_none() {
            return Err(Error::Usage(format!("design '{}' needs the scenario's true variances", cfg.label())));
        }
        Ok(DesignPolicy { cfg, oracle, last_fit: None, neyman: None, cate: None, benefit: None })
    }

    pub fn config(&self) -> &DesignConfig {
        &self.cfg
    }

    fn refit_due(&self, i: usize) -> bool {
        self.last_fit.is_none_or(|f| i >= f + self.cfg.refit_stride)
    }

    fn oracle_law(&self) -> Result<&VarianceLaw<T>> {
        self.oracle.as_ref().ok_or_else(|| Error::Usage("oracle design requested without scenario variances".into()))
    }

    /// Design for unit `traj.len() + 1`.
    pub fn next_design(&mut self, traj: &Trajectory<T>) -> Result<DesignFunction<T>> {
        let i = traj.len();
        let baseline = || DesignFunction::constant(T::lit(self.cfg.baseline_prob));
        match self.cfg.kind {
            DesignKind::NonAdaptive => return baseline(),
            DesignKind::OracleNeyman => {
                if self.neyman.is_none() {
                    let law = self.oracle_law()?.clone();
                    self.neyman = Some(Arc::new(NeymanRule::unclipped(SdSource::Oracle(law))));
                }
                return Ok(DesignFunction::Neyman(self.neyman.clone().expect("set above")));
            }
            _ => {}
        }
        if i < self.cfg.n0 {
            return baseline();
        }
        match self.cfg.kind {
            DesignKind::StandardNeyman => {
                if self.refit_due(i) {
                    let clip = T::lit(self.cfg.clip_lo);
                    let rule = if self.cfg.oracle_variance {
                        NeymanRule {
                            source: SdSource::Oracle(self.oracle_law()?.clone()),
                            clip_lo: clip,
                            clip_hi: T::one() - clip,
                        }
                    } else {
                        standard_neyman_rule(traj, &self.cfg.learner, clip)?
                    };
                    self.neyman = Some(Arc::new(rule));
                    self.last_fit = Some(i);
                }
                Ok(DesignFunction::Neyman(self.neyman.clone().expect("fitted")))
            }
            DesignKind::GbarDriven => {
                if self.refit_due(i) {
                    let rule = if self.cfg.oracle_variance {
                        NeymanRule::unclipped(SdSource::Oracle(self.oracle_law()?.clone()))
                    } else {
                        let r = standard_neyman_rule(traj, &self.cfg.learner, T::zero())?;
                        NeymanRule::unclipped(r.source)
                    };
                    self.neyman = Some(Arc::new(rule));
                    self.last_fit = Some(i);
                }
                Ok(DesignFunction::GbarDriven(GbarStep { step: i, estimate: self.neyman.clone().expect("fitted") }))
            }
            DesignKind::BenefitDriven => {
                if self.refit_due(i) {
                    self.cate = Some(fit_benefit_cate(traj, &self.cfg.learner)?);
                    self.benefit = None;
                    self.last_fit = Some(i);
                }
                let nu: T = nu_schedule(i + 1, self.cfg.n0, self.cfg.nu_period);
                let stale = self.benefit.as_ref().is_none_or(|r| r.nu != nu);
                if stale {
                    let cate = self.cate.clone().expect("fitted");
                    self.benefit = Some(Arc::new(BenefitRule { cate, nu, b: T::lit(self.cfg.b) }));
                }
                Ok(DesignFunction::Benefit(self.benefit.clone().expect("set above")))
            }
            DesignKind::NonAdaptive | DesignKind::OracleNeyman => unreachable!("handled above"),
        }
    }
}
