//! Per-arm polynomial least squares for the outcome mean, the conditional
//! variance and the CATE.

use crate::error::{Error, Result};
use crate::scalar::{horner, Real};
use crate::trial::Trajectory;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_VAR_FLOOR: f64 = 1e-3;

/// Anything that predicts `E[Y | A = a, W = w]`.
pub trait OutcomePredictor<T> {
    fn predict(&self, a: u8, w: T) -> T;
}

impl<T, F: Fn(u8, T) -> T> OutcomePredictor<T> for F {
    fn predict(&self, a: u8, w: T) -> T {
        self(a, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    OutcomeMean,
    ConditionalVariance,
    Cate,
}

impl ModelKind {
    fn code(self) -> f64 {
        match self {
            ModelKind::OutcomeMean => 0.0,
            ModelKind::ConditionalVariance => 1.0,
            ModelKind::Cate => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(ModelKind::OutcomeMean),
            1 => Ok(ModelKind::ConditionalVariance),
            2 => Ok(ModelKind::Cate),
            _ => Err(Error::Usage(format!("unknown model kind code {c}"))),
        }
    }
}

/// Polynomial regression in `w` with one coefficient vector per arm.
///
/// For [`ModelKind::Cate`] only the arm-1 slot is used and predictions ignore
/// the arm. Conditional-variance predictions are floored at `var_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel<T> {
    pub kind: ModelKind,
    pub degree: usize,
    /// `coef[a]` holds intercept first.
    pub coef: [Vec<T>; 2],
    pub var_floor: T,
}

impl<T: Real> OutcomeModel<T> {
    pub fn predict(&self, a: u8, w: T) -> T {
        match self.kind {
            ModelKind::OutcomeMean => horner(&self.coef[a as usize], w),
            ModelKind::ConditionalVariance => horner(&self.coef[a as usize], w).max(self.var_floor),
            ModelKind::Cate => horner(&self.coef[1], w),
        }
    }

    pub(crate) fn encode(&self, out: &mut Vec<T>) {
        out.push(T::lit(self.kind.code()));
        out.push(T::from_usize_lossy(self.degree));
        out.push(self.var_floor);
        out.extend_from_slice(&self.coef[1]);
        if self.kind != ModelKind::Cate {
            out.extend_from_slice(&self.coef[0]);
        }
    }

    pub(crate) fn decode(p: &[T]) -> Result<(Self, usize)> {
        if p.len() < 3 {
            return Err(Error::Usage("truncated model parameters".into()));
        }
        let kind = ModelKind::from_code(p[0].as_f64())?;
        let degree = p[1].as_f64();
        if !(0.0..=32.0).contains(&degree) || degree.fract() != 0.0 {
            return Err(Error::Usage(format!("bad model degree {degree}")));
        }
        let degree = degree as usize;
        let k = degree + 1;
        let arms = if kind == ModelKind::Cate { 1 } else { 2 };
        let used = 3 + arms * k;
        if p.len() < used {
            return Err(Error::Usage("truncated model coefficients".into()));
        }
        let c1 = p[3..3 + k].to_vec();
        let c0 = if arms == 2 { p[3 + k..3 + 2 * k].to_vec() } else { Vec::new() };
        Ok((OutcomeModel { kind, degree, coef: [c0, c1], var_floor: p[2] }, used))
    }
}

impl<T: Real> OutcomePredictor<T> for OutcomeModel<T> {
    fn predict(&self, a: u8, w: T) -> T {
        OutcomeModel::predict(self, a, w)
    }
}

/// Least squares fit of `y` on `1, w, ..., w^degree` via Householder QR.
pub fn fit_polynomial<T: Real>(w: &[T], y: &[T], degree: usize) -> Result<Vec<T>> {
    let m = w.len();
    let p = degree + 1;
    if y.len() != m {
        return Err(Error::Usage("covariate and response lengths differ".into()));
    }
    if m < p {
        return Err(Error::Fitting(format!("{m} points cannot determine a degree-{degree} polynomial")));
    }
    // column-major design matrix
    let mut a = vec![T::zero(); m * p];
    for (i, &wi) in w.iter().enumerate() {
        let mut v = T::one();
        for j in 0..p {
            a[j * m + i] = v;
            v = v * wi;
        }
    }
    let mut b = y.to_vec();
    let mut diag = vec![T::zero(); p];
    for k in 0..p {
        let col = k * m;
        let norm = a[col + k..col + m].iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        if norm == T::zero() {
            diag[k] = T::zero();
            continue;
        }
        let alpha = if a[col + k] > T::zero() { -norm } else { norm };
        a[col + k] = a[col + k] - alpha;
        let vnorm2 = a[col + k..col + m].iter().fold(T::zero(), |acc, &x| acc + x * x);
        diag[k] = alpha;
        if vnorm2 == T::zero() {
            continue;
        }
        for j in k + 1..p {
            let cj = j * m;
            let dot = (k..m).fold(T::zero(), |acc, i| acc + a[col + i] * a[cj + i]);
            let f = T::lit(2.0) * dot / vnorm2;
            for i in k..m {
                a[cj + i] = a[cj + i] - f * a[col + i];
            }
        }
        let dot = (k..m).fold(T::zero(), |acc, i| acc + a[col + i] * b[i]);
        let f = T::lit(2.0) * dot / vnorm2;
        for i in k..m {
            b[i] = b[i] - f * a[col + i];
        }
    }
    let max_diag = diag.iter().fold(T::zero(), |acc, d| acc.max(d.abs()));
    let tol = max_diag * T::epsilon() * T::from_usize_lossy(m.max(p)) * T::lit(8.0);
    for (k, d) in diag.iter().enumerate() {
        if !(d.abs() > tol) {
            return Err(Error::Fitting(format!(
                "rank-deficient polynomial design (degree {degree}, {m} points, column {k} |R_kk| = {:e})",
                d.abs().as_f64()
            )));
        }
    }
    let mut beta = vec![T::zero(); p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in k + 1..p {
            s = s - a[j * m + k] * beta[j];
        }
        beta[k] = s / diag[k];
    }
    Ok(beta)
}

fn arm_data<T: Real>(traj: &Trajectory<T>, arm: u8, response: impl Fn(usize) -> T) -> (Vec<T>, Vec<T>) {
    let mut w = Vec::new();
    let mut y = Vec::new();
    for (i, o) in traj.observations().iter().enumerate() {
        if o.a == arm {
            w.push(o.w);
            y.push(response(i));
        }
    }
    (w, y)
}

fn check_arm_sizes<T: Real>(traj: &Trajectory<T>, degree: usize) -> Result<()> {
    let n1 = traj.observations().iter().filter(|o| o.a == 1).count();
    let n0 = traj.len() - n1;
    let need = degree + 2;
    if n1 < need || n0 < need {
        return Err(Error::Fitting(format!(
            "degree-{degree} per-arm fit needs {need} units per arm, have {n1} treated / {n0} control"
        )));
    }
    Ok(())
}

/// Per-arm polynomial regression of `y` on `w`.
pub fn fit_outcome_regression<T: Real>(traj: &Trajectory<T>, degree: usize) -> Result<OutcomeModel<T>> {
    check_arm_sizes(traj, degree)?;
    let obs = traj.observations();
    let mut coef: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    for arm in 0..2u8 {
        let (w, y) = arm_data(traj, arm, |i| obs[i].y);
        coef[arm as usize] = fit_polynomial(&w, &y, degree)?;
    }
    Ok(OutcomeModel { kind: ModelKind::OutcomeMean, degree, coef, var_floor: T::zero() })
}

/// Pooled sample mean as a (deliberately misspecified) outcome model.
pub fn fit_pooled_mean<T: Real>(traj: &Trajectory<T>) -> Result<OutcomeModel<T>> {
    if traj.is_empty() {
        return Err(Error::Fitting("pooled mean of an empty trajectory".into()));
    }
    let s = traj.observations().iter().fold(T::zero(), |acc, o| acc + o.y);
    let m = s / T::from_usize_lossy(traj.len());
    Ok(OutcomeModel { kind: ModelKind::OutcomeMean, degree: 0, coef: [vec![m], vec![m]], var_floor: T::zero() })
}

/// Per-arm regression of squared residuals from `mean_model`, floored at `var_floor`.
pub fn fit_conditional_variance<T: Real>(
    traj: &Trajectory<T>,
    mean_model: &OutcomeModel<T>,
    degree: usize,
    var_floor: T,
) -> Result<OutcomeModel<T>> {
    if mean_model.kind != ModelKind::OutcomeMean {
        return Err(Error::Usage("conditional variance needs an outcome-mean model".into()));
    }
    if !(var_floor > T::zero()) {
        return Err(Error::Usage(format!("var_floor must be positive, got {var_floor}")));
    }
    check_arm_sizes(traj, degree)?;
    let obs = traj.observations();
    let mut coef: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    for arm in 0..2u8 {
        let (w, r2) = arm_data(traj, arm, |i| {
            let r = obs[i].y - mean_model.predict(arm, obs[i].w);
            r * r
        });
        coef[arm as usize] = fit_polynomial(&w, &r2, degree)?;
    }
    Ok(OutcomeModel { kind: ModelKind::ConditionalVariance, degree, coef, var_floor })
}

/// Doubly robust pseudo-outcome for unit `o` under a known randomization probability.
pub fn dr_pseudo_outcome<T: Real, P: OutcomePredictor<T> + ?Sized>(
    o: &crate::trial::Observation<T>,
    mean_model: &P,
) -> T {
    let sign = if o.a == 1 { T::one() } else { -T::one() };
    sign / o.g_prob * (o.y - mean_model.predict(o.a, o.w)) + mean_model.predict(1, o.w) - mean_model.predict(0, o.w)
}

/// Regress doubly robust pseudo-outcomes on `w` to estimate the CATE.
pub fn fit_cate_dr<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    mean_model: &P,
    degree: usize,
) -> Result<OutcomeModel<T>> {
    let obs = traj.observations();
    if let Some(i) = obs.iter().position(|o| !(o.g_prob > T::zero())) {
        return Err(Error::Positivity(format!("unit {} has zero realized probability", i + 1)));
    }
    let w: Vec<T> = obs.iter().map(|o| o.w).collect();
    let phi: Vec<T> = obs.iter().map(|o| dr_pseudo_outcome(o, mean_model)).collect();
    let c = fit_polynomial(&w, &phi, degree)?;
    Ok(OutcomeModel { kind: ModelKind::Cate, degree, coef: [Vec::new(), c], var_floor: T::zero() })
}

/// Which initial outcome regression the estimators start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeLearner {
    Polynomial,
    PooledMean,
    /// The scenario's true `Qbar_0`; supplied by whoever knows the scenario.
    Oracle,
}

impl OutcomeLearner {
    pub fn label(self) -> &'static str {
        match self {
            OutcomeLearner::Polynomial => "polynomial",
            OutcomeLearner::PooledMean => "pooled_mean",
            OutcomeLearner::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for OutcomeLearner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polynomial" => Ok(OutcomeLearner::Polynomial),
            "pooled_mean" => Ok(OutcomeLearner::PooledMean),
            "oracle" => Ok(OutcomeLearner::Oracle),
            other => Err(Error::Config(format!("unknown outcome model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerConfig {
    pub degree: usize,
    pub var_floor: f64,
    pub outcome: OutcomeLearner,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig { degree: DEFAULT_DEGREE, var_floor: DEFAULT_VAR_FLOOR, outcome: OutcomeLearner::Polynomial }
    }
}

impl LearnerConfig {
    pub fn fit_initial<T: Real>(&self, traj: &Trajectory<T>) -> Result<OutcomeModel<T>> {
        match self.outcome {
            OutcomeLearner::Polynomial => fit_outcome_regression(traj, self.degree),
            OutcomeLearner::PooledMean => fit_pooled_mean(traj),
            OutcomeLearner::Oracle => Err(Error::Usage("the oracle outcome model is not fitted from data".into())),
        }
    }
}
