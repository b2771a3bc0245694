//! Observations, design functions and trajectories of a sequential experiment.
//!
//! A design function `g_i` is stored as a parameter record rather than a
//! closure so that every `g_i` can be re-evaluated at any covariate after the
//! experiment, which the average design `gbar_n = (1/n) sum_i g_i` needs.
//!
//! One design kind, [`DesignFunction::GbarDriven`], is defined relative to
//! the designs enrolled before it: its value at `w` depends on the running
//! sum of earlier designs at the same `w`. Such designs are evaluated by
//! walking the design list in order with a [`DesignWalker`]. Every other kind
//! evaluates standalone.

use std::sync::{Arc, OnceLock};

use crate::designs::gamma_blend_unchecked;
use crate::dgp::VarianceLaw;
use crate::error::{Error, Result};
use crate::learners::{ModelKind, OutcomeModel};
use crate::scalar::Real;

/// Tolerance for the realized-probability consistency check.
pub const CONSISTENCY_TOL: f64 = 1e-12;

/// One enrolled unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<T> {
    pub w: T,
    pub a: u8,
    pub y: T,
    /// Probability of the treatment actually received, `g_i(a_i | w_i)`.
    pub g_prob: T,
}

impl<T: Real> Observation<T> {
    pub fn new(w: T, a: u8, y: T, g_prob: T) -> Result<Self> {
        if a > 1 {
            return Err(Error::Usage(format!("treatment must be 0 or 1, got {a}")));
        }
        if !(g_prob > T::zero() && g_prob <= T::one()) {
            return Err(Error::Usage(format!("realized probability {g_prob} not in (0, 1]")));
        }
        if !y.is_finite() || !w.is_finite() {
            return Err(Error::Usage("covariate and outcome must be finite".into()));
        }
        Ok(Observation { w, a, y, g_prob })
    }

    /// `g_i(1 | w_i)` implied by the realized probability.
    #[inline]
    pub fn treat_prob(&self) -> T {
        if self.a == 1 {
            self.g_prob
        } else {
            T::one() - self.g_prob
        }
    }
}

/// Source of the arm-specific standard deviations in a Neyman rule.
#[derive(Debug, Clone, PartialEq)]
pub enum SdSource<T> {
    /// Conditional-variance regression fitted on accumulated data.
    Fitted(OutcomeModel<T>),
    /// True conditional variances of the generating scenario.
    Oracle(VarianceLaw<T>),
}

/// `w -> clip(sd(1,w) / (sd(1,w) + sd(0,w)), clip_lo, clip_hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeymanRule<T> {
    pub source: SdSource<T>,
    pub clip_lo: T,
    pub clip_hi: T,
}

impl<T: Real> NeymanRule<T> {
    pub fn unclipped(source: SdSource<T>) -> Self {
        NeymanRule { source, clip_lo: T::zero(), clip_hi: T::one() }
    }

    pub fn eval(&self, w: T) -> T {
        let p = match &self.source {
            SdSource::Oracle(law) => law.neyman(w),
            SdSource::Fitted(model) => {
                let s1 = model.predict(1, w).max(T::zero()).sqrt();
                let s0 = model.predict(0, w).max(T::zero()).sqrt();
                let tot = s1 + s0;
                if tot > T::zero() {
                    s1 / tot
                } else {
                    T::lit(0.5)
                }
            }
        };
        p.clamp_to(self.clip_lo, self.clip_hi)
    }

    fn encode(&self, out: &mut Vec<T>) {
        out.push(self.clip_lo);
        out.push(self.clip_hi);
        match &self.source {
            SdSource::Fitted(m) => {
                out.push(T::zero());
                m.encode(out);
            }
            SdSource::Oracle(law) => {
                out.push(T::one());
                law.encode(out);
            }
        }
    }

    fn decode(p: &[T]) -> Result<(Self, usize)> {
        if p.len() < 3 {
            return Err(Error::Usage("truncated Neyman rule parameters".into()));
        }
        let (clip_lo, clip_hi) = (p[0], p[1]);
        let (source, used) = match p[2].as_f64() as i64 {
            0 => {
                let (m, used) = OutcomeModel::decode(&p[3..])?;
                if m.kind != ModelKind::ConditionalVariance {
                    return Err(Error::Usage("Neyman rule needs a conditional-variance model".into()));
                }
                (SdSource::Fitted(m), used)
            }
            1 => {
                let (law, used) = VarianceLaw::decode(&p[3..])?;
                (SdSource::Oracle(law), used)
            }
            c => return Err(Error::Usage(format!("unknown Neyman source code {c}"))),
        };
        Ok((NeymanRule { source, clip_lo, clip_hi }, 3 + used))
    }
}

/// `w -> Gamma_{nu,b}(B(w))` for a fitted CATE model `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenefitRule<T> {
    pub cate: OutcomeModel<T>,
    pub nu: T,
    pub b: T,
}

impl<T: Real> BenefitRule<T> {
    pub fn eval(&self, w: T) -> T {
        gamma_blend_unchecked(self.cate.predict(1, w), self.nu, self.b)
    }
}

/// Step `i` of the gbar-driven design: `g_{i+1} = clip((i+1) target - i gbar_i, 0, 1)`,
/// where the target is the mean of the Neyman estimates recorded by every
/// gbar-driven unit up to and including this one.
#[derive(Debug, Clone)]
pub struct GbarStep<T> {
    /// Number of units enrolled before this one.
    pub step: usize,
    /// This unit's (unclipped) Neyman estimate.
    pub estimate: Arc<NeymanRule<T>>,
}

/// A treatment randomization function `w -> g(1 | w)`.
#[derive(Debug, Clone)]
pub enum DesignFunction<T> {
    Constant(T),
    Neyman(Arc<NeymanRule<T>>),
    Benefit(Arc<BenefitRule<T>>),
    GbarDriven(GbarStep<T>),
}

impl<T: Real> DesignFunction<T> {
    pub fn constant(p: T) -> Result<Self> {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(Error::Usage(format!("constant design probability {p} not in [0, 1]")));
        }
        Ok(DesignFunction::Constant(p))
    }

    /// Whether evaluation needs the designs enrolled before this one.
    pub fn is_contextual(&self) -> bool {
        matches!(self, DesignFunction::GbarDriven(_))
    }

    /// Standalone evaluation of `g(1 | w)`.
    pub fn eval(&self, w: T) -> Result<T> {
        match self {
            DesignFunction::Constant(p) => Ok(*p),
            DesignFunction::Neyman(r) => Ok(r.eval(w)),
            DesignFunction::Benefit(r) => Ok(r.eval(w)),
            DesignFunction::GbarDriven(_) => {
                Err(Error::Usage("gbar-driven design needs its trajectory prefix to be evaluated".into()))
            }
        }
    }

    /// `g(a | w)` for a standalone design.
    pub fn eval_arm(&self, a: u8, w: T) -> Result<T> {
        let p = self.eval(w)?;
        Ok(if a == 1 { p } else { T::one() - p })
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            DesignFunction::Constant(_) => "constant",
            DesignFunction::Neyman(_) => "neyman",
            DesignFunction::Benefit(_) => "benefit",
            DesignFunction::GbarDriven(_) => "gbar_driven",
        }
    }

    /// Flat real-valued parameter record; see [`DesignFunction::from_params`].
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::new();
        match self {
            DesignFunction::Constant(p) => out.push(*p),
            DesignFunction::Neyman(r) => r.encode(&mut out),
            DesignFunction::Benefit(r) => {
                out.push(r.nu);
                out.push(r.b);
                r.cate.encode(&mut out);
            }
            DesignFunction::GbarDriven(s) => {
                out.push(T::from_usize_lossy(s.step));
                s.estimate.encode(&mut out);
            }
        }
        out
    }

    pub fn from_params(kind: &str, p: &[T]) -> Result<Self> {
        let exact = |used: usize| -> Result<()> {
            if used == p.len() {
                Ok(())
            } else {
                Err(Error::Usage(format!("{kind} design: {} parameters, expected {used}", p.len())))
            }
        };
        match kind {
            "constant" => {
                exact(1)?;
                DesignFunction::constant(p[0])
            }
            "neyman" => {
                let (r, used) = NeymanRule::decode(p)?;
                exact(used)?;
                Ok(DesignFunction::Neyman(Arc::new(r)))
            }
            "benefit" => {
                if p.len() < 2 {
                    return Err(Error::Usage("truncated benefit design parameters".into()));
                }
                let (cate, used) = OutcomeModel::decode(&p[2..])?;
                exact(2 + used)?;
                if cate.kind != ModelKind::Cate {
                    return Err(Error::Usage("benefit design needs a CATE model".into()));
                }
                Ok(DesignFunction::Benefit(Arc::new(BenefitRule { cate, nu: p[0], b: p[1] })))
            }
            "gbar_driven" => {
                if p.is_empty() {
                    return Err(Error::Usage("truncated gbar-driven design parameters".into()));
                }
                let step = p[0].as_f64();
                if !(step >= 0.0) || step.fract() != 0.0 {
                    return Err(Error::Usage(format!("bad gbar-driven step {step}")));
                }
                let (r, used) = NeymanRule::decode(&p[1..])?;
                exact(1 + used)?;
                Ok(DesignFunction::GbarDriven(GbarStep { step: step as usize, estimate: Arc::new(r) }))
            }
            other => Err(Error::Usage(format!("unknown design kind '{other}'"))),
        }
    }

    /// Same constant, or the same shared rule instance.
    pub fn same_rule(&self, other: &DesignFunction<T>) -> bool {
        match (self, other) {
            (DesignFunction::Constant(a), DesignFunction::Constant(b)) => a == b,
            (DesignFunction::Neyman(a), DesignFunction::Neyman(b)) => Arc::ptr_eq(a, b),
            (DesignFunction::Benefit(a), DesignFunction::Benefit(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }

    /// Identity of the shared rule, for memoizing runs of identical designs.
    fn rule_id(&self) -> usize {
        match self {
            DesignFunction::Neyman(r) => Arc::as_ptr(r) as *const () as usize,
            DesignFunction::Benefit(r) => Arc::as_ptr(r) as *const () as usize,
            _ => 0,
        }
    }
}

/// Evaluates a design sequence in enrollment order at one covariate value,
/// keeping the running sums that gbar-driven designs depend on.
#[derive(Debug, Clone)]
pub struct DesignWalker<T> {
    w: T,
    count: usize,
    sum: T,
    estimate_sum: T,
    estimate_count: usize,
    memo: (usize, T),
    estimate_memo: (usize, T),
}

impl<T: Real> DesignWalker<T> {
    pub fn new(w: T) -> Self {
        DesignWalker {
            w,
            count: 0,
            sum: T::zero(),
            estimate_sum: T::zero(),
            estimate_count: 0,
            memo: (0, T::zero()),
            estimate_memo: (0, T::zero()),
        }
    }

    pub fn w(&self) -> T {
        self.w
    }

    /// Number of designs walked so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// `sum_j g_j(1 | w)` over the designs walked so far.
    pub fn sum(&self) -> T {
        self.sum
    }

    /// Average design `gbar(1 | w)` over the designs walked so far.
    pub fn mean(&self) -> T {
        if self.count == 0 {
            T::nan()
        } else {
            self.sum / T::from_usize_lossy(self.count)
        }
    }

    fn estimate_value(&mut self, rule: &Arc<NeymanRule<T>>) -> T {
        let id = Arc::as_ptr(rule) as usize;
        if self.estimate_memo.0 != id {
            self.estimate_memo = (id, rule.eval(self.w));
        }
        self.estimate_memo.1
    }

    fn value_of(&mut self, d: &DesignFunction<T>) -> Result<(T, T)> {
        match d {
            DesignFunction::Constant(p) => Ok((*p, T::zero())),
            DesignFunction::Neyman(_) | DesignFunction::Benefit(_) => {
                let id = d.rule_id();
                if self.memo.0 != id {
                    self.memo = (id, d.eval(self.w)?);
                }
                Ok((self.memo.1, T::zero()))
            }
            DesignFunction::GbarDriven(s) => {
                if s.step != self.count {
                    return Err(Error::Usage(format!(
                        "gbar-driven design recorded for step {} evaluated at position {}",
                        s.step, self.count
                    )));
                }
                let e = self.estimate_value(&s.estimate);
                let target = (self.estimate_sum + e) / T::from_usize_lossy(self.estimate_count + 1);
                let raw = T::from_usize_lossy(self.count + 1) * target - self.sum;
                Ok((raw.clamp_to(T::zero(), T::one()), e))
            }
        }
    }

    /// Value `g(1 | w)` the design would take if it were enrolled next.
    pub fn peek(&mut self, d: &DesignFunction<T>) -> Result<T> {
        Ok(self.value_of(d)?.0)
    }

    /// Enroll `d` and return its value `g(1 | w)`.
    pub fn push(&mut self, d: &DesignFunction<T>) -> Result<T> {
        let (v, e) = self.value_of(d)?;
        if d.is_contextual() {
            self.estimate_sum = self.estimate_sum + e;
            self.estimate_count += 1;
        }
        self.sum = self.sum + v;
        self.count += 1;
        Ok(v)
    }
}

/// `gbar_n(a | w) = (1/n) sum_i g_i(a | w)`.
pub fn average_design<T: Real>(designs: &[DesignFunction<T>], w: T, a: u8) -> Result<T> {
    if designs.is_empty() {
        return Err(Error::Usage("average design of an empty design list".into()));
    }
    let mut walker = DesignWalker::new(w);
    for d in designs {
        walker.push(d)?;
    }
    let p1 = walker.mean();
    Ok(if a == 1 { p1 } else { T::one() - p1 })
}

/// True iff `gbar_n(a | w) >= zeta` for both arms at every grid point.
pub fn positivity_check<T: Real>(designs: &[DesignFunction<T>], w_grid: &[T], zeta: T) -> Result<bool> {
    if designs.is_empty() {
        return Err(Error::Usage("positivity check of an empty design list".into()));
    }
    for &w in w_grid {
        let p1 = average_design(designs, w, 1)?;
        if p1 < zeta || T::one() - p1 < zeta {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The observed sequence `O_1, ..., O_n` with the designs that generated it.
#[derive(Debug, Clone, Default)]
pub struct Trajectory<T> {
    obs: Vec<Observation<T>>,
    designs: Vec<DesignFunction<T>>,
    scenario_meta: String,
    // gbar_n(1 | w_i) at every observed covariate, filled on first use
    gbar_cache: OnceLock<Vec<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(scenario_meta: impl Into<String>) -> Self {
        Trajectory {
            obs: Vec::new(),
            designs: Vec::new(),
            scenario_meta: scenario_meta.into(),
            gbar_cache: OnceLock::new(),
        }
    }

    /// Build and validate a trajectory; every realized probability must match
    /// its design to [`CONSISTENCY_TOL`].
    pub fn from_parts(
        obs: Vec<Observation<T>>,
        designs: Vec<DesignFunction<T>>,
        scenario_meta: impl Into<String>,
    ) -> Result<Self> {
        if obs.len() != designs.len() {
            return Err(Error::Usage(format!("{} observations but {} designs", obs.len(), designs.len())));
        }
        let t = Trajectory { obs, designs, scenario_meta: scenario_meta.into(), gbar_cache: OnceLock::new() };
        t.check_consistency(T::lit(CONSISTENCY_TOL))?;
        Ok(t)
    }

    /// Append a unit. The caller guarantees `obs.g_prob` was computed from `design`.
    pub fn push(&mut self, obs: Observation<T>, design: DesignFunction<T>) {
        self.obs.push(obs);
        self.designs.push(design);
        self.gbar_cache = OnceLock::new();
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn observations(&self) -> &[Observation<T>] {
        &self.obs
    }

    pub fn designs(&self) -> &[DesignFunction<T>] {
        &self.designs
    }

    pub fn scenario_meta(&self) -> &str {
        &self.scenario_meta
    }

    /// The first `n` units.
    pub fn prefix(&self, n: usize) -> Trajectory<T> {
        let n = n.min(self.len());
        Trajectory {
            obs: self.obs[..n].to_vec(),
            designs: self.designs[..n].to_vec(),
            scenario_meta: self.scenario_meta.clone(),
            gbar_cache: OnceLock::new(),
        }
    }

    /// Prefixes of lengths `ns` (increasing). When the designs depend on
    /// their history, every unit's covariate is walked once and the running
    /// averages fill each prefix's `gbar_observed` cache; the values are
    /// bit-identical to walking each prefix separately.
    pub fn prefixes(&self, ns: &[usize]) -> Result<Vec<Trajectory<T>>> {
        if ns.windows(2).any(|p| p[0] >= p[1]) || ns.last().is_some_and(|&n| n > self.len()) {
            return Err(Error::Usage("prefix lengths must increase and fit in the trajectory".into()));
        }
        let out: Vec<Trajectory<T>> = ns.iter().map(|&n| self.prefix(n)).collect();
        if !self.designs.iter().any(DesignFunction::is_contextual) {
            return Ok(out);
        }
        let n_max = ns.last().copied().unwrap_or(0);
        let mut tables: Vec<Vec<T>> = ns.iter().map(|&n| Vec::with_capacity(n)).collect();
        for (j, o) in self.obs[..n_max].iter().enumerate() {
            let mut walker = DesignWalker::new(o.w);
            let mut k = ns.iter().position(|&n| n > j).expect("j < n_max");
            for d in &self.designs[..n_max] {
                walker.push(d)?;
                while k < ns.len() && walker.count() == ns[k] {
                    tables[k].push(walker.mean());
                    k += 1;
                }
            }
        }
        for (t, table) in out.iter().zip(tables) {
            t.gbar_cache.set(table).expect("fresh prefix has no cache");
        }
        Ok(out)
    }

    /// Walker positioned after every design in the trajectory.
    pub fn walk_to_end(&self, w: T) -> Result<DesignWalker<T>> {
        let mut walker = DesignWalker::new(w);
        for d in &self.designs {
            walker.push(d)?;
        }
        Ok(walker)
    }

    /// `gbar_n(1 | w)`.
    pub fn gbar(&self, w: T) -> Result<T> {
        if self.is_empty() {
            return Err(Error::Usage("average design of an empty trajectory".into()));
        }
        Ok(self.walk_to_end(w)?.mean())
    }

    /// `g(1 | w)` of a design that would be enrolled as the next unit.
    pub fn eval_next(&self, design: &DesignFunction<T>, w: T) -> Result<T> {
        if design.is_contextual() {
            self.walk_to_end(w)?.peek(design)
        } else {
            design.eval(w)
        }
    }

    /// `g_i(1 | w)` for every enrolled design, evaluated at one `w`.
    pub fn design_values_at(&self, w: T) -> Result<Vec<T>> {
        let mut walker = DesignWalker::new(w);
        self.designs.iter().map(|d| walker.push(d)).collect()
    }

    /// `gbar_n(1 | w_i)` at every observed covariate, cached after the first call.
    pub fn gbar_observed(&self) -> Result<&[T]> {
        if let Some(v) = self.gbar_cache.get() {
            return Ok(v);
        }
        if self.is_empty() {
            return Ok(self.gbar_cache.get_or_init(Vec::new));
        }
        let vals = if self.designs.iter().any(DesignFunction::is_contextual) {
            self.obs.iter().map(|o| self.gbar(o.w)).collect::<Result<Vec<T>>>()?
        } else {
            let runs = self.runs();
            let n = T::from_usize_lossy(self.len());
            self.obs
                .iter()
                .map(|o| {
                    let mut s = T::zero();
                    for (d, count) in &runs {
                        s = s + d.eval(o.w)? * T::from_usize_lossy(*count);
                    }
                    Ok(s / n)
                })
                .collect::<Result<Vec<T>>>()?
        };
        Ok(self.gbar_cache.get_or_init(|| vals))
    }

    /// Consecutive runs of designs sharing one rule (or one constant).
    fn runs(&self) -> Vec<(&DesignFunction<T>, usize)> {
        let mut runs: Vec<(&DesignFunction<T>, usize)> = Vec::new();
        for d in &self.designs {
            if let Some((prev, count)) = runs.last_mut() {
                if d.same_rule(prev) {
                    *count += 1;
                    continue;
                }
            }
            runs.push((d, 1));
        }
        runs
    }

    /// Recompute each `g_i(a_i | w_i)` from the design list and compare with
    /// the recorded realized probability.
    pub fn check_consistency(&self, tol: T) -> Result<()> {
        for (i, (o, d)) in self.obs.iter().zip(&self.designs).enumerate() {
            let p1 = if d.is_contextual() {
                let mut walker = DesignWalker::new(o.w);
                for prev in &self.designs[..i] {
                    walker.push(prev)?;
                }
                walker.peek(d)?
            } else {
                d.eval(o.w)?
            };
            let p = if o.a == 1 { p1 } else { T::one() - p1 };
            if !((p - o.g_prob).abs() <= tol) {
                return Err(Error::Usage(format!(
                    "unit {}: recorded g_prob {} but design gives {}",
                    i + 1,
                    o.g_prob,
                    p
                )));
            }
        }
        Ok(())
    }
}
