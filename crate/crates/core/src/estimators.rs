//! Targeted and augmented estimators of the average treatment effect from
//! adaptive-design data.
//!
//! The ADL variants weight residuals by the average design `gbar_n`; the AD
//! variants use each unit's own randomization probability `g_i`.

use std::fmt;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::learners::OutcomePredictor;
use crate::scalar::{expit, log_expit, logit, Real};
use crate::trial::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    AdlTmle,
    AdTmle,
    AdlAipw,
    AdAipw,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::AdlTmle, EstimatorKind::AdTmle, EstimatorKind::AdlAipw, EstimatorKind::AdAipw];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::AdlTmle => "ADL-TMLE",
            EstimatorKind::AdTmle => "AD-TMLE",
            EstimatorKind::AdlAipw => "ADL-AIPW",
            EstimatorKind::AdAipw => "AD-AIPW",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Wald interval level is `1 - alpha`.
    pub alpha: f64,
    /// Truncation of initial predictions on the unit scale.
    pub delta_trunc: f64,
    /// Target for `|(1/n) sum H_i (Y_i - Qbar*_i)|` on the unit scale.
    pub score_tol: f64,
    pub max_iter: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { alpha: 0.05, delta_trunc: 1e-4, score_tol: 1e-8, max_iter: 100 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("estimator.alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.delta_trunc > 0.0 && self.delta_trunc < 0.5) {
            return Err(Error::Config(format!("estimator.delta_trunc must be in (0, 0.5), got {}", self.delta_trunc)));
        }
        if !(self.score_tol > 0.0) {
            return Err(Error::Config("estimator.score_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("estimator.max_iter must be positive".into()));
        }
        Ok(())
    }

    /// Standard normal quantile `z_{1 - alpha/2}`.
    pub fn z_quantile(&self) -> f64 {
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        n.inverse_cdf(1.0 - self.alpha / 2.0)
    }
}

/// Point estimate with its Wald interval.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport<T> {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub psi: T,
    pub se: T,
    pub ci_lo: T,
    pub ci_hi: T,
    /// Fluctuation coefficient; `None` for the augmented estimators.
    pub epsilon: Option<T>,
    /// Mean weighted residual `(1/n) sum H_i (Y_i - Qbar_i)`; unit scale for
    /// the TMLEs, outcome scale for the augmented estimators.
    pub score_residual: T,
}

impl<T: Real> EstimateReport<T> {
    pub fn covers(&self, truth: T) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

/// Affine map of outcomes onto the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledOutcomes<T> {
    pub values: Vec<T>,
    /// Observed minimum and maximum.
    pub lo: T,
    pub hi: T,
    /// All outcomes equal; values are the constant 1/2.
    pub degenerate: bool,
    offset: T,
    span: T,
}

impl<T: Real> ScaledOutcomes<T> {
    /// Min–max scaling, optionally padded so the observed range lands on
    /// `[margin, 1 - margin]` instead of `[0, 1]`.
    pub fn new(y: &[T], margin: T) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Usage("cannot scale an empty outcome vector".into()));
        }
        let lo = y.iter().fold(T::infinity(), |m, &v| m.min(v));
        let hi = y.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Usage("outcomes must be finite".into()));
        }
        let (offset, span, degenerate) = if hi > lo {
            let range = hi - lo;
            let pad = margin * range / (T::one() - T::lit(2.0) * margin);
            (lo - pad, range + pad + pad, false)
        } else {
            (lo - T::lit(0.5), T::one(), true)
        };
        let values = y.iter().map(|&v| (v - offset) / span).collect();
        Ok(ScaledOutcomes { values, lo, hi, degenerate, offset, span })
    }

    pub fn to_unit(&self, y: T) -> T {
        (y - self.offset) / self.span
    }

    pub fn from_unit(&self, v: T) -> T {
        self.offset + self.span * v
    }

    pub fn span(&self) -> T {
        self.span
    }
}

/// Plain min–max scaling of a trajectory's outcomes to `[0, 1]`.
pub fn scale_to_unit<T: Real>(traj: &Trajectory<T>) -> Result<ScaledOutcomes<T>> {
    let y: Vec<T> = traj.observations().iter().map(|o| o.y).collect();
    ScaledOutcomes::new(&y, T::zero())
}

/// `H_n(a, w) = (2a - 1) / gbar_n(a | w)`.
pub fn clever_covariate_adl<T: Real>(traj: &Trajectory<T>, a: u8, w: T) -> Result<T> {
    let p1 = traj.gbar(w)?;
    let g = if a == 1 { p1 } else { T::one() - p1 };
    if !(g > T::zero()) {
        return Err(Error::Positivity(format!("average design gbar_n({a} | {w}) = 0")));
    }
    Ok(if a == 1 { T::one() / g } else { -T::one() / g })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationOptions {
    pub score_tol: f64,
    pub max_iter: usize,
}

impl From<&EstimatorConfig> for FluctuationOptions {
    fn from(c: &EstimatorConfig) -> Self {
        FluctuationOptions { score_tol: c.score_tol, max_iter: c.max_iter }
    }
}

/// Solution of the one-dimensional logistic fluctuation
/// `logit Q_eps = logit Q + eps H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fluctuation<T> {
    pub epsilon: T,
    pub iterations: usize,
    /// `(1/n) sum H_i (y_i - Q_eps,i)` at the returned epsilon.
    pub score_residual: T,
}

impl<T: Real> Fluctuation<T> {
    /// Updated prediction `expit(logit q + eps h)`.
    pub fn update(&self, q: T, h: T) -> T {
        expit(logit(q) + self.epsilon * h)
    }
}

struct FluctuationData<'a, T> {
    y: &'a [T],
    offset: Vec<T>,
    h: &'a [T],
}

impl<T: Real> FluctuationData<'_, T> {
    fn score_info(&self, eps: T) -> (T, T) {
        let mut score = T::zero();
        let mut info = T::zero();
        for ((&y, &off), &h) in self.y.iter().zip(&self.offset).zip(self.h) {
            let p = expit(off + eps * h);
            score = score + h * (y - p);
            info = info + h * h * p * (T::one() - p);
        }
        let n = T::from_usize_lossy(self.y.len());
        (score / n, info / n)
    }

    fn loglik(&self, eps: T) -> T {
        let mut ll = T::zero();
        for ((&y, &off), &h) in self.y.iter().zip(&self.offset).zip(self.h) {
            let eta = off + eps * h;
            ll = ll + y * log_expit(eta) + (T::one() - y) * log_expit(-eta);
        }
        ll / T::from_usize_lossy(self.y.len())
    }
}

/// Newton solve of the quasi-binomial score `sum H_i (y_i - expit(logit q_i + eps H_i)) = 0`.
///
/// `y` must lie in `[0, 1]` and `q` strictly inside `(0, 1)`.
pub fn tmle_fluctuate<T: Real>(y: &[T], q: &[T], h: &[T], opts: &FluctuationOptions) -> Result<Fluctuation<T>> {
    let n = y.len();
    if n == 0 || q.len() != n || h.len() != n {
        return Err(Error::Usage("fluctuation inputs must be nonempty and equally long".into()));
    }
    if let Some(i) = q.iter().position(|&v| !(v > T::zero() && v < T::one())) {
        return Err(Error::Usage(format!("initial prediction {} at unit {} not in (0, 1)", q[i], i + 1)));
    }
    if let Some(i) = h.iter().position(|v| !v.is_finite()) {
        return Err(Error::Positivity(format!("non-finite clever covariate at unit {}", i + 1)));
    }
    if let Some(i) = y.iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Usage(format!("scaled outcome {} at unit {} not in [0, 1]", y[i], i + 1)));
    }
    let data = FluctuationData { y, offset: q.iter().map(|&v| logit(v)).collect(), h };
    let tol = T::lit(opts.score_tol);

    let mut eps = T::zero();
    let (mut score, mut info) = data.score_info(eps);
    if score.abs() <= tol {
        return Ok(Fluctuation { epsilon: eps, iterations: 0, score_residual: score });
    }

    // The likelihood has no finite maximizer when the score keeps its sign as eps -> +-inf.
    let mut lim_pos = T::zero();
    let mut lim_neg = T::zero();
    for (&yi, &hi) in y.iter().zip(h) {
        if hi > T::zero() {
            lim_pos = lim_pos + hi * (yi - T::one());
            lim_neg = lim_neg + hi * yi;
        } else if hi < T::zero() {
            lim_pos = lim_pos + hi * yi;
            lim_neg = lim_neg + hi * (yi - T::one());
        }
    }
    if (score > T::zero() && lim_pos >= T::zero()) || (score < T::zero() && lim_neg <= T::zero()) {
        return Err(Error::Separation(format!(
            "score {} does not change sign along the fluctuation direction; epsilon is unbounded",
            score
        )));
    }

    let mut ll = data.loglik(eps);
    let slack = T::epsilon() * T::lit(64.0);
    for it in 1..=opts.max_iter {
        if !(info > T::zero()) || !info.is_finite() {
            return Err(Error::Numerical(format!("degenerate fluctuation information {info}")));
        }
        let mut step = score / info;
        let mut candidate = eps + step;
        let mut ll_new = data.loglik(candidate);
        let mut halvings = 0;
        while !(ll_new >= ll - slack * (T::one() + ll.abs())) {
            halvings += 1;
            if halvings > 60 {
                return Err(Error::NonConvergence { iterations: it, residual: score.as_f64() });
            }
            step = step * T::lit(0.5);
            candidate = eps + step;
            ll_new = data.loglik(candidate);
        }
        eps = candidate;
        ll = ll_new;
        let si = data.score_info(eps);
        score = si.0;
        info = si.1;
        if score.abs() <= tol {
            return Ok(Fluctuation { epsilon: eps, iterations: it, score_residual: score });
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, residual: score.as_f64() })
}

/// Randomization probabilities `P(A = 1 | W = w_i)` used as weights.
fn adl_weights<T: Real>(traj: &Trajectory<T>) -> Result<Vec<T>> {
    let p1 = traj.gbar_observed()?;
    for (i, &p) in p1.iter().enumerate() {
        if !(p > T::zero() && p < T::one()) {
            let arm = if p > T::zero() { 0 } else { 1 };
            return Err(Error::Positivity(format!("average design gbar_n({arm} | w) = 0 at unit {}", i + 1)));
        }
    }
    Ok(p1.to_vec())
}

fn ad_weights<T: Real>(traj: &Trajectory<T>) -> Result<Vec<T>> {
    traj.observations()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let p = o.treat_prob();
            if p > T::zero() && p < T::one() {
                Ok(p)
            } else {
                let arm = if p > T::zero() { 0 } else { 1 };
                Err(Error::Positivity(format!("unit {} has g_i({arm} | w_i) = 0", i + 1)))
            }
        })
        .collect()
}

struct Inputs<T> {
    y: Vec<T>,
    a: Vec<u8>,
    h1: Vec<T>,
    h0: Vec<T>,
    q1: Vec<T>,
    q0: Vec<T>,
}

impl<T: Real> Inputs<T> {
    fn new<P: OutcomePredictor<T> + ?Sized>(traj: &Trajectory<T>, p1: &[T], qbar: &P) -> Result<Self> {
        if traj.is_empty() {
            return Err(Error::Usage("cannot estimate from an empty trajectory".into()));
        }
        let obs = traj.observations();
        let q1: Vec<T> = obs.iter().map(|o| qbar.predict(1, o.w)).collect();
        let q0: Vec<T> = obs.iter().map(|o| qbar.predict(0, o.w)).collect();
        if q1.iter().chain(&q0).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("initial outcome regression produced a non-finite prediction".into()));
        }
        Ok(Inputs {
            y: obs.iter().map(|o| o.y).collect(),
            a: obs.iter().map(|o| o.a).collect(),
            h1: p1.iter().map(|&p| T::one() / p).collect(),
            h0: p1.iter().map(|&p| -T::one() / (T::one() - p)).collect(),
            q1,
            q0,
        })
    }

    fn h_obs(&self, i: usize) -> T {
        if self.a[i] == 1 {
            self.h1[i]
        } else {
            self.h0[i]
        }
    }

    fn n(&self) -> T {
        T::from_usize_lossy(self.y.len())
    }

    /// Report for predictions `(m1, m0)` on the outcome scale. `augment` adds
    /// the mean weighted residual to the plug-in.
    fn report(&self, m1: &[T], m0: &[T], augment: bool, cfg: &EstimatorConfig) -> (T, T, T, T, T) {
        let n = self.n();
        let mut resid_mean = T::zero();
        let mut plug = T::zero();
        for i in 0..self.y.len() {
            let m = if self.a[i] == 1 { m1[i] } else { m0[i] };
            resid_mean = resid_mean + self.h_obs(i) * (self.y[i] - m);
            plug = plug + (m1[i] - m0[i]);
        }
        resid_mean = resid_mean / n;
        plug = plug / n;
        let psi = if augment { plug + resid_mean } else { plug };
        let mut s2 = T::zero();
        for i in 0..self.y.len() {
            let m = if self.a[i] == 1 { m1[i] } else { m0[i] };
            let d = self.h_obs(i) * (self.y[i] - m) + m1[i] - m0[i] - psi;
            s2 = s2 + d * d;
        }
        let sigma2 = s2 / n;
        let se = (sigma2 / n).sqrt();
        let z = T::lit(cfg.z_quantile());
        (psi, se, psi - z * se, psi + z * se, resid_mean)
    }
}

fn targeted<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    p1: &[T],
    qbar_init: &P,
    cfg: &EstimatorConfig,
    kind: EstimatorKind,
) -> Result<EstimateReport<T>> {
    cfg.validate()?;
    let inp = Inputs::new(traj, p1, qbar_init)?;
    let delta = T::lit(cfg.delta_trunc);
    let scaled = ScaledOutcomes::new(&inp.y, delta)?;
    let trunc = |v: T| scaled.to_unit(v).clamp_to(delta, T::one() - delta);
    let q1: Vec<T> = inp.q1.iter().map(|&v| trunc(v)).collect();
    let q0: Vec<T> = inp.q0.iter().map(|&v| trunc(v)).collect();
    let q_obs: Vec<T> = (0..inp.y.len()).map(|i| if inp.a[i] == 1 { q1[i] } else { q0[i] }).collect();
    let h_obs: Vec<T> = (0..inp.y.len()).map(|i| inp.h_obs(i)).collect();
    let fl = tmle_fluctuate(&scaled.values, &q_obs, &h_obs, &cfg.into())?;

    // With no fluctuation and no truncation the targeted prediction is the
    // initial one; skipping the scale round trip keeps it bit-exact.
    let lo = scaled.from_unit(delta);
    let hi = scaled.from_unit(T::one() - delta);
    let star = |raw: T, q: T, h: T| {
        if fl.epsilon == T::zero() && raw >= lo && raw <= hi {
            raw
        } else {
            scaled.from_unit(fl.update(q, h))
        }
    };
    let star1: Vec<T> = (0..inp.y.len()).map(|i| star(inp.q1[i], q1[i], inp.h1[i])).collect();
    let star0: Vec<T> = (0..inp.y.len()).map(|i| star(inp.q0[i], q0[i], inp.h0[i])).collect();
    let (psi, se, ci_lo, ci_hi, _) = inp.report(&star1, &star0, false, cfg);
    Ok(EstimateReport {
        estimator: kind,
        n: inp.y.len(),
        psi,
        se,
        ci_lo,
        ci_hi,
        epsilon: Some(fl.epsilon),
        score_residual: fl.score_residual,
    })
}

fn augmented<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    p1: &[T],
    qbar_init: &P,
    cfg: &EstimatorConfig,
    kind: EstimatorKind,
) -> Result<EstimateReport<T>> {
    cfg.validate()?;
    let inp = Inputs::new(traj, p1, qbar_init)?;
    let (psi, se, ci_lo, ci_hi, resid) = inp.report(&inp.q1, &inp.q0, true, cfg);
    Ok(EstimateReport { estimator: kind, n: inp.y.len(), psi, se, ci_lo, ci_hi, epsilon: None, score_residual: resid })
}

/// TMLE with clever covariate built from the average design `gbar_n`.
pub fn adl_tmle<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    qbar_init: &P,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport<T>> {
    let p1 = adl_weights(traj)?;
    targeted(traj, &p1, qbar_init, cfg, EstimatorKind::AdlTmle)
}

/// TMLE with clever covariate built from each unit's own design `g_i`.
pub fn ad_tmle<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    qbar_init: &P,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport<T>> {
    let p1 = ad_weights(traj)?;
    targeted(traj, &p1, qbar_init, cfg, EstimatorKind::AdTmle)
}

/// One-step / AIPW estimator weighted by `gbar_n`.
pub fn aipw_adl<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    qbar_init: &P,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport<T>> {
    let p1 = adl_weights(traj)?;
    augmented(traj, &p1, qbar_init, cfg, EstimatorKind::AdlAipw)
}

/// One-step / AIPW estimator weighted by each unit's `g_i`.
pub fn aipw_ad<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    qbar_init: &P,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport<T>> {
    let p1 = ad_weights(traj)?;
    augmented(traj, &p1, qbar_init, cfg, EstimatorKind::AdAipw)
}

/// Run one estimator by kind.
pub fn estimate<T: Real, P: OutcomePredictor<T> + ?Sized>(
    kind: EstimatorKind,
    traj: &Trajectory<T>,
    qbar_init: &P,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport<T>> {
    match kind {
        EstimatorKind::AdlTmle => adl_tmle(traj, qbar_init, cfg),
        EstimatorKind::AdTmle => ad_tmle(traj, qbar_init, cfg),
        EstimatorKind::AdlAipw => aipw_adl(traj, qbar_init, cfg),
        EstimatorKind::AdAipw => aipw_ad(traj, qbar_init, cfg),
    }
}

/// All four estimators; each entry fails independently.
pub fn estimate_all<T: Real, P: OutcomePredictor<T> + ?Sized>(
    traj: &Trajectory<T>,
    qbar_init: &P,
    cfg: &EstimatorConfig,
) -> [Result<EstimateReport<T>>; 4] {
    EstimatorKind::ALL.map(|k| estimate(k, traj, qbar_init, cfg))
}
