//! Seeded Monte Carlo harness: empirical survival of the realisation-level
//! filter on the two-database Gaussian counting workload, side by side with
//! the deterministic stopping times of the mechanism-level baselines.
//!
//! Trials draw from independent, explicitly numbered RNG streams of one
//! seeded generator, and per-trial results merge through an order-agnostic
//! integer histogram, so curves are bit-identical for any worker count. The
//! parallel driver sits behind the `parallel` feature; disabling it swaps in
//! a sequential fold with the same external behaviour.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::domain::{
    DatabaseSpace, DpError, FixedStrategy, Instance, PrivacyBudget, Request, Result, RoundSpec,
};
use crate::gaussian::{kappa, optimize_params, FilterParams, GaussianSetting};
use crate::mech_filters::{stopping_time_additive, stopping_time_advanced, stopping_time_rdp};
use crate::mechanisms::GaussianCountingMechanism;
use crate::realisation::{run_filter, HaltPolicy};

/// Which survival curves a simulation produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FilterKind {
    Additive,
    Advanced,
    Rdp,
    Realisation,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] =
        [FilterKind::Additive, FilterKind::Advanced, FilterKind::Rdp, FilterKind::Realisation];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Additive => "additive",
            FilterKind::Advanced => "advanced",
            FilterKind::Rdp => "rdp",
            FilterKind::Realisation => "realisation",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "additive" => Ok(FilterKind::Additive),
            "advanced" => Ok(FilterKind::Advanced),
            "rdp" => Ok(FilterKind::Rdp),
            "realisation" => Ok(FilterKind::Realisation),
            _ => Err(DpError::Parse(format!("unknown filter '{name}'"))),
        }
    }
}

/// Simulation setup: the Gaussian workload, the shared privacy budget, the
/// trial plan, and which curves to produce.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub max_rounds: usize,
    pub trials: usize,
    pub seed: u64,
    pub filters: Vec<FilterKind>,
    pub output_path: Option<PathBuf>,
    /// Overrides for the realisation filter; both unset selects the
    /// optimizer's parameters.
    pub delta_tilde: Option<f64>,
    pub theta: Option<f64>,
}

impl SimConfig {
    /// Parses `key = value` lines; `#` starts a comment. Required keys:
    /// sigma, epsilon, delta, max_rounds. Optional: trials (default 100000),
    /// seed (default 42), filters (comma separated, default all), out,
    /// delta_tilde, theta.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut sigma = None;
        let mut epsilon = None;
        let mut delta = None;
        let mut max_rounds = None;
        let mut trials = None;
        let mut seed = None;
        let mut filters = None;
        let mut output_path = None;
        let mut delta_tilde = None;
        let mut theta = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DpError::Parse(format!("line {}: expected key = value", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                DpError::Parse(format!("line {}: invalid {what} '{value}'", idx + 1))
            };
            match key {
                "sigma" => sigma = Some(value.parse().map_err(|_| bad("number"))?),
                "epsilon" => epsilon = Some(value.parse().map_err(|_| bad("number"))?),
                "delta" => delta = Some(value.parse().map_err(|_| bad("number"))?),
                "max_rounds" => max_rounds = Some(value.parse().map_err(|_| bad("count"))?),
                "trials" => trials = Some(value.parse().map_err(|_| bad("count"))?),
                "seed" => seed = Some(value.parse().map_err(|_| bad("seed"))?),
                "delta_tilde" => delta_tilde = Some(value.parse().map_err(|_| bad("number"))?),
                "theta" => theta = Some(value.parse().map_err(|_| bad("number"))?),
                "out" => output_path = Some(PathBuf::from(value)),
                "filters" => {
                    let mut kinds = Vec::new();
                    for name in value.split(',') {
                        let kind = FilterKind::from_name(name.trim())?;
                        if kinds.contains(&kind) {
                            return Err(DpError::Parse(format!(
                                "line {}: duplicate filter '{}'",
                                idx + 1,
                                kind.name()
                            )));
                        }
                        kinds.push(kind);
                    }
                    filters = Some(kinds);
                }
                _ => {
                    return Err(DpError::Parse(format!("line {}: unknown key '{key}'", idx + 1)))
                }
            }
        }
        let require = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| DpError::Parse(format!("missing required key '{name}'")))
        };
        let config = SimConfig {
            sigma: require("sigma", sigma)?,
            epsilon: require("epsilon", epsilon)?,
            delta: require("delta", delta)?,
            max_rounds: max_rounds
                .ok_or_else(|| DpError::Parse("missing required key 'max_rounds'".into()))?,
            trials: trials.unwrap_or(100_000),
            seed: seed.unwrap_or(42),
            filters: filters.unwrap_or_else(|| FilterKind::ALL.to_vec()),
            output_path,
            delta_tilde,
            theta,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(DpError::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpError::InvalidParameter(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(DpError::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_rounds == 0 {
            return Err(DpError::InvalidParameter("max_rounds must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(DpError::InvalidParameter("trials must be at least 1".into()));
        }
        if self.filters.is_empty() {
            return Err(DpError::InvalidParameter("no filters selected".into()));
        }
        if (self.delta_tilde.is_some()) != (self.theta.is_some()) {
            return Err(DpError::InvalidParameter(
                "delta_tilde and theta must be overridden together".into(),
            ));
        }
        Ok(())
    }

    /// Realisation-filter parameters: the explicit override when present,
    /// otherwise the optimizer's pair for this horizon and budget.
    pub fn filter_params(&self) -> Result<FilterParams> {
        let budget = PrivacyBudget::new(self.epsilon, self.delta)?;
        match (self.delta_tilde, self.theta) {
            (Some(dt), Some(th)) => FilterParams::new(dt, th, self.max_rounds, &budget),
            _ => optimize_params(self.max_rounds, &budget, 1e-12),
        }
    }
}

/// One survival curve: `points[t] = (t, P(stopping time >= t))` for
/// t = 0..=max_rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    pub filter_name: String,
    pub points: Vec<(usize, f64)>,
    pub trials: usize,
    pub seed: u64,
}

impl SurvivalCurve {
    pub fn survival(&self, t: usize) -> f64 {
        self.points
            .iter()
            .find(|(s, _)| *s == t)
            .map(|&(_, v)| v)
            .unwrap_or(0.0)
    }

    fn from_histogram(name: &str, hist: &[u64], trials: usize, seed: u64) -> Self {
        // hist[t] counts trials stopping exactly at t; survival is the
        // complementary cumulative sum.
        let mut points = Vec::with_capacity(hist.len());
        let mut above = trials as u64;
        for (t, &count) in hist.iter().enumerate() {
            points.push((t, above as f64 / trials as f64));
            above -= count;
        }
        SurvivalCurve { filter_name: name.into(), points, trials, seed }
    }

    fn step(name: &str, cutoff: usize, max_rounds: usize, trials: usize, seed: u64) -> Self {
        let points =
            (0..=max_rounds).map(|t| (t, if t <= cutoff { 1.0 } else { 0.0 })).collect();
        SurvivalCurve { filter_name: name.into(), points, trials, seed }
    }
}

/// The two-database Gaussian counting workload: one counting query per
/// round, answers differing by exactly 1 between the neighbours.
pub fn counting_workload(sigma: f64, rounds: usize) -> Instance {
    let space =
        DatabaseSpace::new(vec!["x".into(), "x-prime".into()], &[(0, 1)]).expect("static space");
    let mech = Arc::new(
        GaussianCountingMechanism::new(sigma, vec![0.0, 1.0]).expect("sigma validated upstream"),
    );
    let rounds = (0..rounds)
        .map(|_| RoundSpec { requests: vec![Request::Id(0)], mechanism: mech.clone() })
        .collect();
    Instance { space, rounds }
}

#[cfg(feature = "parallel")]
fn merge_hist(mut a: Vec<u64>, b: Vec<u64>) -> Vec<u64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

/// Stopping-time histogram of the realisation filter over seeded trials.
/// Trial `i` always draws from stream `i` of the seeded generator, so the
/// histogram does not depend on scheduling.
fn realisation_histogram(
    config: &SimConfig,
    instance: &Instance,
    budget: &PrivacyBudget,
    params: &FilterParams,
    threshold: f64,
) -> Result<Vec<u64>> {
    let strategy = FixedStrategy { requests: vec![Request::Id(0)] };
    let run_trial = |trial: usize| -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(trial as u64);
        let run = run_filter(
            instance,
            budget,
            params,
            HaltPolicy::KappaThreshold(threshold),
            &strategy,
            0,
            &mut rng,
        )?;
        Ok(run.stopping_time)
    };
    let zero = || vec![0u64; config.max_rounds + 1];
    let fold = |mut hist: Vec<u64>, t: Result<usize>| -> Result<Vec<u64>> {
        hist[t?] += 1;
        Ok(hist)
    };
    #[cfg(feature = "parallel")]
    {
        (0..config.trials)
            .into_par_iter()
            .map(run_trial)
            .try_fold(zero, fold)
            .try_reduce(zero, |a, b| Ok(merge_hist(a, b)))
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..config.trials).map(run_trial).try_fold(zero(), fold)
    }
}

/// Produces the survival curve of every selected filter. The realisation
/// curve is empirical; the mechanism-level curves are exact step functions
/// falling at their respective stopping times. The workload is symmetric in
/// the two databases, so a single curve covers both.
pub fn simulate_survival(config: &SimConfig) -> Result<Vec<SurvivalCurve>> {
    config.validate()?;
    let budget = PrivacyBudget::new(config.epsilon, config.delta)?;
    let mut setting = GaussianSetting::new(config.sigma, 1.0)?;
    setting.query_values = vec![0.0, 1.0];

    let mut curves = Vec::new();
    for &kind in &config.filters {
        let curve = match kind {
            FilterKind::Additive => SurvivalCurve::step(
                kind.name(),
                stopping_time_additive(&setting, &budget)?,
                config.max_rounds,
                config.trials,
                config.seed,
            ),
            FilterKind::Advanced => SurvivalCurve::step(
                kind.name(),
                stopping_time_advanced(&setting, &budget)?,
                config.max_rounds,
                config.trials,
                config.seed,
            ),
            FilterKind::Rdp => SurvivalCurve::step(
                kind.name(),
                stopping_time_rdp(&setting, &budget)?,
                config.max_rounds,
                config.trials,
                config.seed,
            ),
            FilterKind::Realisation => {
                let params = config.filter_params()?;
                let threshold = kappa(config.epsilon, &setting, &params);
                let instance = counting_workload(config.sigma, config.max_rounds);
                let hist =
                    realisation_histogram(config, &instance, &budget, &params, threshold)?;
                SurvivalCurve::from_histogram(
                    kind.name(),
                    &hist,
                    config.trials,
                    config.seed,
                )
            }
        };
        curves.push(curve);
    }
    Ok(curves)
}

/// Renders curves as CSV: header `filter,t,survival,trials,seed`, one row
/// per point, sorted by (filter, t), survival at 12 significant digits.
pub fn emit_csv(curves: &[SurvivalCurve]) -> String {
    let mut sorted: Vec<&SurvivalCurve> = curves.iter().collect();
    sorted.sort_by(|a, b| a.filter_name.cmp(&b.filter_name));
    let mut out = String::from("filter,t,survival,trials,seed\n");
    for curve in sorted {
        let mut points = curve.points.clone();
        points.sort_by_key(|&(t, _)| t);
        for (t, s) in points {
            out.push_str(&format!(
                "{},{},{:.11e},{},{}\n",
                curve.filter_name, t, s, curve.trials, curve.seed
            ));
        }
    }
    out
}

/// Parses [`emit_csv`] output back into curves (grouped by filter, point
/// order preserved). Values round-trip to the printed precision.
pub fn parse_csv(text: &str) -> Result<Vec<SurvivalCurve>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("filter,t,survival,trials,seed") => {}
        other => {
            return Err(DpError::Parse(format!(
                "bad or missing CSV header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut curves: Vec<SurvivalCurve> = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DpError::Parse(format!("row {}: expected 5 fields", idx + 2)));
        }
        let bad = |what: &str| DpError::Parse(format!("row {}: invalid {what}", idx + 2));
        let t: usize = fields[1].parse().map_err(|_| bad("round"))?;
        let s: f64 = fields[2].parse().map_err(|_| bad("survival"))?;
        let trials: usize = fields[3].parse().map_err(|_| bad("trials"))?;
        let seed: u64 = fields[4].parse().map_err(|_| bad("seed"))?;
        match curves.last_mut() {
            Some(c) if c.filter_name == fields[0] => {
                if trials != c.trials || seed != c.seed {
                    return Err(DpError::Parse(format!(
                        "row {}: trials/seed differ within one curve",
                        idx + 2
                    )));
                }
                c.points.push((t, s));
            }
            _ => curves.push(SurvivalCurve {
                filter_name: fields[0].to_string(),
                points: vec![(t, s)],
                trials,
                seed,
            }),
        }
    }
    Ok(curves)
}
