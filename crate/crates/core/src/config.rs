//! Flat `key = value` configuration with dotted namespaces.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. A key may
//! be given without its namespace when the last component is unambiguous, so
//! `reps=10` means `mc.reps=10`.

use std::fmt;
use std::str::FromStr;

use crate::designs::{DesignConfig, DesignKind};
use crate::dgp::{multisite_scenario, CovariateLaw, MultisiteScenario, Scenario};
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::learners::OutcomeLearner;
use crate::trial::DesignFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    AppendixB,
    NullEffect,
    Multisite,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::AppendixB => "appendix_b",
            ScenarioKind::NullEffect => "null_effect",
            ScenarioKind::Multisite => "multisite",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appendix_b" => Ok(ScenarioKind::AppendixB),
            "null_effect" => Ok(ScenarioKind::NullEffect),
            "multisite" => Ok(ScenarioKind::Multisite),
            other => Err(Error::Config(format!("unknown scenario kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Support of the uniform covariate law.
    pub w_lo: f64,
    pub w_hi: f64,
    /// Seed of a single simulated trial.
    pub seed: u64,
    /// Constant treatment effect of the null-effect scenario.
    pub effect: f64,
    /// Constant treatment probability of each site (multisite only).
    pub site_designs: Vec<f64>,
    pub site_probs: Vec<f64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::AppendixB,
            w_lo: 0.0,
            w_hi: 3.0,
            seed: 1,
            effect: 0.0,
            site_designs: vec![0.2, 0.5, 0.8],
            site_probs: vec![0.3, 0.4, 0.3],
        }
    }
}

impl ScenarioSpec {
    pub fn scenario(&self) -> Result<Scenario<f64>> {
        let base = match self.kind {
            ScenarioKind::AppendixB => Scenario::appendix_b(),
            ScenarioKind::NullEffect => Scenario::null_effect(self.effect),
            ScenarioKind::Multisite => Scenario::appendix_b().with_name("multisite"),
        };
        Ok(base.with_covariates(CovariateLaw::uniform(self.w_lo, self.w_hi)?))
    }

    /// The site mixture, present only for the multisite kind.
    pub fn multisite(&self) -> Result<Option<MultisiteScenario<f64>>> {
        if self.kind != ScenarioKind::Multisite {
            return Ok(None);
        }
        let designs = self.site_designs.iter().map(|&p| DesignFunction::constant(p)).collect::<Result<Vec<_>>>()?;
        let ms = multisite_scenario(designs.len(), designs, &self.site_probs)?;
        Ok(Some(ms.with_scenario(self.scenario()?)))
    }

    fn w_law(&self) -> String {
        format!("uniform:{}:{}", self.w_lo, self.w_hi)
    }
}

/// Monte Carlo schedule and replication settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McSettings {
    pub reps: usize,
    pub base_seed: u64,
    /// Units enrolled per period after the burn-in cohort.
    pub per_period: usize,
    pub num_periods: usize,
    /// Logged periods, 1-based; period 1 is the burn-in cohort.
    pub time_points: Vec<usize>,
    /// Bootstrap resamples for relative-variance intervals.
    pub bootstrap: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings {
            reps: 500,
            base_seed: 20240101,
            per_period: 250,
            num_periods: 10,
            time_points: vec![2, 4, 6, 8, 10],
            bootstrap: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub scenario: ScenarioSpec,
    pub design: DesignConfig,
    pub estimator: EstimatorConfig,
    pub mc: McSettings,
}

pub const KEYS: &[&str] = &[
    "scenario.kind",
    "scenario.w_law",
    "scenario.seed",
    "scenario.effect",
    "scenario.site_designs",
    "scenario.site_probs",
    "design.kind",
    "design.n0",
    "design.baseline_prob",
    "design.b",
    "design.clip_lo",
    "design.refit_stride",
    "design.nu_period",
    "design.oracle_variance",
    "learner.degree",
    "learner.var_floor",
    "learner.outcome_model",
    "estimator.alpha",
    "estimator.delta_trunc",
    "estimator.score_tol",
    "estimator.max_iter",
    "mc.reps",
    "mc.base_seed",
    "mc.per_period",
    "mc.num_periods",
    "mc.time_points",
    "mc.bootstrap",
];

fn resolve_key(key: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    if !key.contains('.') {
        let hits: Vec<&&str> = KEYS.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
        match hits.len() {
            1 => return Ok(hits[0]),
            0 => {}
            _ => {
                let names: Vec<&str> = hits.iter().map(|k| **k).collect();
                return Err(Error::Config(format!("ambiguous key '{key}': one of {}", names.join(", "))));
            }
        }
    }
    Err(Error::Config(format!("unknown key '{key}'")))
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join<V: fmt::Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Parse a config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { line: idx + 1, msg: format!("expected key=value, got '{line}'") });
            };
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must look like key=value, got '{kv}'")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = resolve_key(key)?;
        match key {
            "scenario.kind" => self.scenario.kind = v.parse()?,
            "scenario.w_law" => {
                let parts: Vec<&str> = v.split(':').collect();
                match parts.as_slice() {
                    ["uniform", lo, hi] => {
                        let lo: f64 = num(key, lo)?;
                        let hi: f64 = num(key, hi)?;
                        CovariateLaw::uniform(lo, hi)?;
                        self.scenario.w_lo = lo;
                        self.scenario.w_hi = hi;
                    }
                    _ => return Err(Error::Config(format!("{key}: expected uniform:LO:HI, got '{v}'"))),
                }
            }
            "scenario.seed" => self.scenario.seed = num(key, v)?,
            "scenario.effect" => self.scenario.effect = num(key, v)?,
            "scenario.site_designs" => self.scenario.site_designs = list(key, v)?,
            "scenario.site_probs" => self.scenario.site_probs = list(key, v)?,
            "design.kind" => self.design.kind = v.parse::<DesignKind>()?,
            "design.n0" => self.design.n0 = num(key, v)?,
            "design.baseline_prob" => self.design.baseline_prob = num(key, v)?,
            "design.b" => self.design.b = num(key, v)?,
            "design.clip_lo" => self.design.clip_lo = num(key, v)?,
            "design.refit_stride" => self.design.refit_stride = num(key, v)?,
            "design.nu_period" => self.design.nu_period = num(key, v)?,
            "design.oracle_variance" => self.design.oracle_variance = boolean(key, v)?,
            "learner.degree" => self.design.learner.degree = num(key, v)?,
            "learner.var_floor" => self.design.learner.var_floor = num(key, v)?,
            "learner.outcome_model" => self.design.learner.outcome = v.parse::<OutcomeLearner>()?,
            "estimator.alpha" => self.estimator.alpha = num(key, v)?,
            "estimator.delta_trunc" => self.estimator.delta_trunc = num(key, v)?,
            "estimator.score_tol" => self.estimator.score_tol = num(key, v)?,
            "estimator.max_iter" => self.estimator.max_iter = num(key, v)?,
            "mc.reps" => self.mc.reps = num(key, v)?,
            "mc.base_seed" => self.mc.base_seed = num(key, v)?,
            "mc.per_period" => self.mc.per_period = num(key, v)?,
            "mc.num_periods" => self.mc.num_periods = num(key, v)?,
            "mc.time_points" => self.mc.time_points = list(key, v)?,
            "mc.bootstrap" => self.mc.bootstrap = num(key, v)?,
            _ => unreachable!("resolve_key returns listed keys only"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        self.estimator.validate()?;
        self.scenario.scenario()?;
        self.scenario.multisite()?;
        if self.mc.per_period == 0 || self.mc.num_periods == 0 {
            return Err(Error::Config("mc.per_period and mc.num_periods must be positive".into()));
        }
        if self.mc.time_points.is_empty() {
            return Err(Error::Config("mc.time_points must not be empty".into()));
        }
        if self.mc.time_points.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("mc.time_points must be strictly increasing".into()));
        }
        if let Some(&t) = self.mc.time_points.iter().find(|&&t| t == 0 || t > self.mc.num_periods) {
            return Err(Error::Config(format!("time point {t} outside 1..={}", self.mc.num_periods)));
        }
        if self.design.n0 == 0 {
            return Err(Error::Config("design.n0 must be positive".into()));
        }
        Ok(())
    }

    /// Sample size at a 1-based period.
    pub fn n_at(&self, period: usize) -> usize {
        self.design.n0 + (period - 1) * self.mc.per_period
    }

    /// `(period, n)` for every logged time point.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        self.mc.time_points.iter().map(|&t| (t, self.n_at(t))).collect()
    }

    pub fn value_of(&self, key: &str) -> Result<String> {
        let key = resolve_key(key)?;
        let s = &self.scenario;
        let d = &self.design;
        let e = &self.estimator;
        let m = &self.mc;
        Ok(match key {
            "scenario.kind" => s.kind.label().to_string(),
            "scenario.w_law" => s.w_law(),
            "scenario.seed" => s.seed.to_string(),
            "scenario.effect" => s.effect.to_string(),
            "scenario.site_designs" => join(&s.site_designs),
            "scenario.site_probs" => join(&s.site_probs),
            "design.kind" => d.kind.label().to_string(),
            "design.n0" => d.n0.to_string(),
            "design.baseline_prob" => d.baseline_prob.to_string(),
            "design.b" => d.b.to_string(),
            "design.clip_lo" => d.clip_lo.to_string(),
            "design.refit_stride" => d.refit_stride.to_string(),
            "design.nu_period" => d.nu_period.to_string(),
            "design.oracle_variance" => d.oracle_variance.to_string(),
            "learner.degree" => d.learner.degree.to_string(),
            "learner.var_floor" => d.learner.var_floor.to_string(),
            "learner.outcome_model" => d.learner.outcome.label().to_string(),
            "estimator.alpha" => e.alpha.to_string(),
            "estimator.delta_trunc" => e.delta_trunc.to_string(),
            "estimator.score_tol" => e.score_tol.to_string(),
            "estimator.max_iter" => e.max_iter.to_string(),
            "mc.reps" => m.reps.to_string(),
            "mc.base_seed" => m.base_seed.to_string(),
            "mc.per_period" => m.per_period.to_string(),
            "mc.num_periods" => m.num_periods.to_string(),
            "mc.time_points" => join(&m.time_points),
            "mc.bootstrap" => m.bootstrap.to_string(),
            _ => unreachable!("resolve_key returns listed keys only"),
        })
    }
}

/// Every key with its effective value, one per line. Floats print in the
/// shortest form that reparses to the same bits.
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            let v = self.value_of(key).map_err(|_| fmt::Error)?;
            writeln!(f, "{key}={v}")?;
        }
        Ok(())
    }
}
