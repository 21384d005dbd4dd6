//! Mechanism-level composition filters: the classical additive filter, the
//! concentrated-sum filter, and a Renyi-divergence filter, together with
//! the worst-case stopping times each one admits when every round is an
//! identical Gaussian query. These are the baselines the realisation-level
//! filter is compared against.

use crate::domain::{DpError, PrivacyBudget, Result};
use crate::gaussian::{gaussian_privacy_curve, GaussianSetting};

/// Per-round worst-case guarantee (epsilon_i, delta_i) declared ahead of
/// round i.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerRoundDP {
    pub epsilon: f64,
    pub delta: f64,
}

impl PerRoundDP {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !(0.0..=1.0).contains(&delta) {
            return Err(DpError::InvalidParameter(format!(
                "per-round guarantee ({epsilon}, {delta}) out of range"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Decision returned by every mechanism-level filter check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Continue,
    Halt,
}

/// Additive filter: continue while both budgets sum within bounds.
pub fn additive_check(history: &[PerRoundDP], budget: &PrivacyBudget) -> FilterVerdict {
    let eps_sum: f64 = history.iter().map(|g| g.epsilon).sum();
    let delta_sum: f64 = history.iter().map(|g| g.delta).sum();
    if eps_sum <= budget.epsilon && delta_sum <= budget.delta {
        FilterVerdict::Continue
    } else {
        FilterVerdict::Halt
    }
}

/// Slack constant in the concentrated-sum bound.
pub const ADVANCED_SLACK: f64 = 28.04;

/// Concentrated-sum bound on the total loss of rounds with pure budgets
/// `epsilons`, targeting total budget `epsilon` at confidence
/// `delta_prime`. The filter continues while this value stays below
/// `epsilon`.
pub fn advanced_f(epsilons: &[f64], epsilon: f64, delta_prime: f64) -> f64 {
    let k = ADVANCED_SLACK * (1.0 / delta_prime).ln();
    let drift: f64 = epsilons.iter().map(|&e| e * (e.exp() - 1.0) / 2.0).sum();
    let sq: f64 = epsilons.iter().map(|&e| e * e).sum();
    let width = (2.0 * (sq + epsilon * epsilon / k)).sqrt();
    let log_factor = 1.0 + 0.5 * (k * sq / (epsilon * epsilon) + 1.0).ln();
    drift + width * (log_factor * (2.0 / delta_prime).ln()).sqrt()
}

/// Concentrated-sum filter: continue while the sum bound stays within
/// epsilon and the per-round deltas, discounted by their epsilons, leave
/// room for the confidence term delta_prime inside delta.
pub fn advanced_check(
    history: &[PerRoundDP],
    budget: &PrivacyBudget,
    delta_prime: f64,
) -> FilterVerdict {
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return FilterVerdict::Halt;
    }
    let epsilons: Vec<f64> = history.iter().map(|g| g.epsilon).collect();
    let f = advanced_f(&epsilons, budget.epsilon, delta_prime);
    let mut delta_load = delta_prime;
    for g in history {
        if g.delta == 0.0 {
            continue;
        }
        if g.epsilon == 0.0 {
            return FilterVerdict::Halt;
        }
        delta_load += 2.0 * g.delta / (g.epsilon * g.epsilon.exp());
    }
    if f <= budget.epsilon && delta_load <= budget.delta {
        FilterVerdict::Continue
    } else {
        FilterVerdict::Halt
    }
}

/// Per-round Renyi cost of order alpha for one Gaussian query.
pub fn gaussian_renyi_cost(setting: &GaussianSetting, alpha: f64) -> f64 {
    let d2 = setting.sensitivity * setting.sensitivity;
    alpha * d2 / (2.0 * setting.sigma * setting.sigma)
}

/// Renyi filter at fixed order alpha: continue while the accumulated Renyi
/// cost stays within eps_alpha.
pub fn rdp_check(costs: &[f64], eps_alpha: f64) -> FilterVerdict {
    if costs.iter().sum::<f64>() <= eps_alpha {
        FilterVerdict::Continue
    } else {
        FilterVerdict::Halt
    }
}

/// Standard conversion from a Renyi guarantee at order alpha to
/// (epsilon, delta)-DP.
pub fn rdp_to_dp(eps_alpha: f64, alpha: f64, delta: f64) -> f64 {
    eps_alpha + (1.0 / delta).ln() / (alpha - 1.0)
}

/// Smallest total epsilon any fixed Renyi order can certify for t Gaussian
/// rounds: the order that balances accumulation against conversion gives
/// t/(2 sigma^2) + 2 sqrt(t ln(1/delta) / (2 sigma^2)), scaled by the
/// squared sensitivity.
pub fn rdp_optimal_epsilon(setting: &GaussianSetting, t: usize, delta: f64) -> f64 {
    let d2 = setting.sensitivity * setting.sensitivity;
    let base = d2 / (2.0 * setting.sigma * setting.sigma);
    let l = (1.0 / delta).ln();
    t as f64 * base + 2.0 * (t as f64 * base * l).sqrt()
}

const STOPPING_TIME_CAP: usize = 1_000_000;

/// Rounds the additive filter sustains when the budget is split evenly t
/// ways and each round is priced on the exact Gaussian curve at
/// delta_i = delta / t. The per-round price only grows as t does, so the
/// first failing t ends the scan.
pub fn stopping_time_additive(setting: &GaussianSetting, budget: &PrivacyBudget) -> Result<usize> {
    if !(budget.delta > 0.0 && budget.delta < 1.0) {
        return Err(DpError::InvalidParameter(format!(
            "stopping time requires 0 < delta < 1, got {}",
            budget.delta
        )));
    }
    let mut best = 0usize;
    for t in 1..=STOPPING_TIME_CAP {
        let eps_i = gaussian_privacy_curve(setting, budget.delta / t as f64)?;
        if t as f64 * eps_i <= budget.epsilon {
            best = t;
        } else {
            return Ok(best);
        }
    }
    Err(DpError::InfeasibleBudget(
        "additive stopping time exceeds the scan cap".into(),
    ))
}

fn advanced_max_rounds(eps_i: f64, delta_i: f64, budget: &PrivacyBudget, delta_prime: f64) -> usize {
    let delta_step = if delta_i == 0.0 {
        0.0
    } else if eps_i == 0.0 {
        return 0;
    } else {
        2.0 * delta_i / (eps_i * eps_i.exp())
    };
    let delta_room = budget.delta - delta_prime;
    if delta_room < 0.0 {
        return 0;
    }
    let mut t = 0usize;
    let mut epsilons = Vec::new();
    while t < STOPPING_TIME_CAP {
        epsilons.push(eps_i);
        let next = t + 1;
        if next as f64 * delta_step > delta_room {
            return t;
        }
        if advanced_f(&epsilons, budget.epsilon, delta_prime) > budget.epsilon {
            return t;
        }
        t = next;
    }
    t
}

/// Best stopping time of the concentrated-sum filter over identical rounds,
/// maximized over the per-round delta and the confidence split. A log grid
/// over both free parameters with one local refinement pass; the exact
/// curve is consulted once per candidate delta_i.
pub fn stopping_time_advanced(setting: &GaussianSetting, budget: &PrivacyBudget) -> Result<usize> {
    if !(budget.delta > 0.0 && budget.delta < 1.0) {
        return Err(DpError::InvalidParameter(format!(
            "stopping time requires 0 < delta < 1, got {}",
            budget.delta
        )));
    }
    let delta = budget.delta;
    let grid = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        let ratio = (hi / lo).powf(1.0 / (n as f64 - 1.0));
        let mut v = Vec::with_capacity(n);
        let mut x = lo;
        for _ in 0..n {
            v.push(x.min(hi));
            x *= ratio;
        }
        v
    };

    let search = |delta_is: &[f64], delta_primes: &[f64]| -> Result<(usize, (f64, f64))> {
        let mut best = 0usize;
        let mut best_pt = (delta / 2.0, delta / 2.0);
        for &delta_i in delta_is {
            let eps_i = gaussian_privacy_curve(setting, delta_i)?;
            for &delta_prime in delta_primes {
                if delta_prime >= delta {
                    continue;
                }
                let t = advanced_max_rounds(eps_i, delta_i, budget, delta_prime);
                if t > best {
                    best = t;
                    best_pt = (delta_i, delta_prime);
                }
            }
        }
        Ok((best, best_pt))
    };

    let coarse_d = grid(delta * 1e-8, delta * (1.0 - 1e-9), 96);
    let coarse_p = grid(delta * 1e-8, delta * (1.0 - 1e-9), 96);
    let (mut best, (di, dp)) = search(&coarse_d, &coarse_p)?;
    if best > 0 {
        // Refine around the best coarse point within one grid cell.
        let cell = (1e8_f64).powf(1.0 / 95.0);
        let fine_d = grid(di / cell, (di * cell).min(delta * (1.0 - 1e-9)), 48);
        let fine_p = grid(dp / cell, (dp * cell).min(delta * (1.0 - 1e-9)), 48);
        best = best.max(search(&fine_d, &fine_p)?.0);
    }
    Ok(best)
}

/// Rounds the Renyi filter sustains at its best fixed order: the largest t
/// whose optimal epsilon stays within budget. Monotone in t, so scan up.
pub fn stopping_time_rdp(setting: &GaussianSetting, budget: &PrivacyBudget) -> Result<usize> {
    if !(budget.delta > 0.0 && budget.delta < 1.0) {
        return Err(DpError::InvalidParameter(format!(
            "stopping time requires 0 < delta < 1, got {}",
            budget.delta
        )));
    }
    let mut best = 0usize;
    for t in 1..=STOPPING_TIME_CAP {
        if rdp_optimal_epsilon(setting, t, budget.delta) <= budget.epsilon {
            best = t;
        } else {
            return Ok(best);
        }
    }
    Err(DpError::InfeasibleBudget(
        "Renyi stopping time exceeds the scan cap".into(),
    ))
}
