//! Brute-force verification on small finite instances: exact enumeration of
//! the halted-transcript distribution and the DP-gap functional over it.
//!
//! The gap between two transcript distributions at level epsilon is
//! sup_S [P_x(S) - e^eps P_x'(S)] over measurable sets of transcripts. For
//! discrete distributions the sup is attained by collecting every atom with
//! positive margin, so it equals the positive-part sum used here exactly.
//! A filter is (eps, delta)-DP on an instance iff the gap stays at or below
//! delta for every ordered neighbour pair.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::{
    AdversaryStrategy, DpError, Instance, LeakageLedger, PrivacyBudget, Result, RoundCtx,
    Transcript,
};
use crate::gaussian::{leakage_distribution, std_normal_cdf, FilterParams, GaussianSetting};
use crate::realisation::{absorb_output, delta_hat_check, naive_precheck_halts, HaltPolicy};

/// Ceiling on explored tree nodes (internal nodes and emitted atoms alike).
pub const DEFAULT_ATOM_BUDGET: usize = 1_000_000;

/// Identity of the enumeration setup, minus the database: two distributions
/// are comparable only when their instances, policies and budgets agree.
#[derive(Debug, Clone, PartialEq)]
pub struct UniverseTag {
    n_rounds: usize,
    n_dbs: usize,
    policy: HaltPolicy,
    delta_tilde: f64,
    theta: f64,
    epsilon: f64,
    delta: f64,
}

/// Exact distribution of released transcripts under one database.
#[derive(Debug, Clone)]
pub struct TranscriptDistribution {
    db: usize,
    atoms: BTreeMap<Transcript, f64>,
    tag: UniverseTag,
}

impl TranscriptDistribution {
    pub fn database(&self) -> usize {
        self.db
    }

    pub fn atoms(&self) -> &BTreeMap<Transcript, f64> {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Probability of one released transcript; 0 when unreachable under this
    /// database.
    pub fn prob(&self, t: &Transcript) -> f64 {
        self.atoms.get(t).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.values().sum()
    }

    pub fn tag(&self) -> &UniverseTag {
        &self.tag
    }
}

struct DfsState<'a> {
    instance: &'a Instance,
    budget: &'a PrivacyBudget,
    params: &'a FilterParams,
    policy: HaltPolicy,
    strategy: &'a dyn AdversaryStrategy,
    db: usize,
    atom_budget: usize,
    nodes: usize,
    atoms: BTreeMap<Transcript, f64>,
}

impl DfsState<'_> {
    fn charge(&mut self) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.atom_budget {
            return Err(DpError::AtomBudgetExceeded(self.atom_budget));
        }
        Ok(())
    }

    fn emit(&mut self, transcript: &Transcript, p: f64) -> Result<()> {
        self.charge()?;
        *self.atoms.entry(transcript.clone()).or_insert(0.0) += p;
        Ok(())
    }

    fn gate(&self, round: usize, transcript: &mut Transcript, ledger: &LeakageLedger) -> Result<bool> {
        match self.policy {
            HaltPolicy::DeltaHat => {
                delta_hat_check(self.instance, round, transcript, ledger, self.budget, self.params)
            }
            HaltPolicy::KappaThreshold(kappa) => {
                Ok(ledger.entries().iter().all(|&l| l <= kappa))
            }
            HaltPolicy::NaivePreRelease => Ok(true),
        }
    }

    /// Expands round `i`; the transcript holds outputs through i - 1 and the
    /// ledger the cumulative leakage through i - 1.
    fn expand(
        &mut self,
        i: usize,
        transcript: &mut Transcript,
        ledger: &LeakageLedger,
        p: f64,
    ) -> Result<()> {
        self.charge()?;
        let n = self.n_rounds();
        let spec = self.instance.round_spec(i);
        let mech = spec.mechanism.clone();
        let r_i = self.strategy.next_request(i, transcript, &spec.requests);
        if !spec.requests.contains(&r_i) {
            return Err(DpError::InvalidParameter(format!(
                "strategy chose a request outside round {i}'s allowed set"
            )));
        }
        transcript.push_request(r_i);
        let res = self.expand_pending(i, n, mech.as_ref(), r_i, transcript, ledger, p);
        transcript.pop_request();
        res
    }

    /// Continuation of [`Self::expand`] with round `i`'s request pushed; the
    /// caller pops it regardless of outcome so errors cannot skew the shared
    /// transcript.
    #[allow(clippy::too_many_arguments)]
    fn expand_pending(
        &mut self,
        i: usize,
        n: usize,
        mech: &dyn crate::domain::Mechanism,
        r_i: crate::domain::Request,
        transcript: &mut Transcript,
        ledger: &LeakageLedger,
        p: f64,
    ) -> Result<()> {
        if self.policy == HaltPolicy::NaivePreRelease
            && naive_precheck_halts(self.instance, i, transcript, ledger, self.budget)?
        {
            let mut released = transcript.clone();
            released.pop_request();
            return self.emit(&released, p);
        }

        // The gate for round i + 1 ignores the output of round i, so it is
        // decided once per node rather than once per branch.
        let next_ok =
            if i < n { self.gate(i, transcript, ledger)? } else { true };

        let support = {
            let ctx = RoundCtx { round: i, request: r_i, history: transcript };
            mech.support(&ctx).ok_or_else(|| {
                DpError::UnsupportedMechanism(
                    "transcript enumeration requires finite supports".into(),
                )
            })?
        };
        for y in &support {
            let q = {
                let ctx = RoundCtx { round: i, request: r_i, history: transcript };
                match mech.prob(&ctx, self.db, y) {
                    Some(q) => q,
                    None => mech.log_density(&ctx, self.db, y).exp(),
                }
            };
            if q <= 0.0 {
                continue;
            }
            transcript.push_output(*y);
            let mut child = ledger.clone();
            {
                let ctx = RoundCtx { round: i, request: r_i, history: transcript };
                absorb_output(&mut child, self.instance, mech, &ctx, y);
            }
            let res = if i == n || !next_ok {
                self.emit(transcript, p * q)
            } else {
                self.expand(i + 1, transcript, &child, p * q)
            };
            transcript.pop_output();
            res?;
        }
        Ok(())
    }

    fn n_rounds(&self) -> usize {
        self.instance.n_rounds().min(self.params.max_rounds)
    }
}

/// Exact distribution of released transcripts when the filtered protocol
/// runs under `db`, by depth-first expansion with the same halt rules as the
/// live engine. Fails rather than subsampling once the tree outgrows
/// `atom_budget` explored nodes.
pub fn enumerate_transcripts_with_budget(
    instance: &Instance,
    budget: &PrivacyBudget,
    params: &FilterParams,
    policy: HaltPolicy,
    strategy: &dyn AdversaryStrategy,
    db: usize,
    atom_budget: usize,
) -> Result<TranscriptDistribution> {
    if db >= instance.space.len() {
        return Err(DpError::InvalidParameter(format!("database index {db} out of range")));
    }
    let mut state = DfsState {
        instance,
        budget,
        params,
        policy,
        strategy,
        db,
        atom_budget,
        nodes: 0,
        atoms: BTreeMap::new(),
    };
    let mut transcript = Transcript::with_sentinel();
    let ledger = LeakageLedger::new(&instance.space);
    let n = state.n_rounds();
    if n >= 1 && !state.gate(0, &mut transcript, &ledger)? {
        state.emit(&transcript, 1.0)?;
    } else if n >= 1 {
        state.expand(1, &mut transcript, &ledger, 1.0)?;
    } else {
        state.emit(&transcript, 1.0)?;
    }
    Ok(TranscriptDistribution {
        db,
        atoms: state.atoms,
        tag: UniverseTag {
            n_rounds: n,
            n_dbs: instance.space.len(),
            policy,
            delta_tilde: params.delta_tilde,
            theta: params.theta,
            epsilon: budget.epsilon,
            delta: budget.delta,
        },
    })
}

/// [`enumerate_transcripts_with_budget`] at the default atom budget.
pub fn enumerate_transcripts(
    instance: &Instance,
    budget: &PrivacyBudget,
    params: &FilterParams,
    policy: HaltPolicy,
    strategy: &dyn AdversaryStrategy,
    db: usize,
) -> Result<TranscriptDistribution> {
    enumerate_transcripts_with_budget(
        instance,
        budget,
        params,
        policy,
        strategy,
        db,
        DEFAULT_ATOM_BUDGET,
    )
}

/// sup_S [P_x(S) - e^eps P_x'(S)] via the positive-part sum over atoms.
/// Atoms absent from one side carry probability 0 there; the distributions
/// must come from the same instance, policy and budget.
pub fn dp_gap(
    dist_x: &TranscriptDistribution,
    dist_x_prime: &TranscriptDistribution,
    epsilon: f64,
) -> Result<f64> {
    if dist_x.tag != dist_x_prime.tag {
        return Err(DpError::MismatchedUniverse);
    }
    let scale = epsilon.exp();
    let mut gap = 0.0;
    for (atom, &px) in &dist_x.atoms {
        let margin = px - scale * dist_x_prime.prob(atom);
        if margin > 0.0 {
            gap += margin;
        }
    }
    Ok(gap)
}

/// Monte Carlo cross-check of the single-round leakage tail: draws leakages
/// from the analytic normal law and compares the empirical exceedance of
/// `headroom` against the closed-form tail. Returns (empirical, analytic)
/// for assertion within a few standard errors.
pub fn mc_tail_check(
    setting: &GaussianSetting,
    headroom: f64,
    samples: usize,
    rng_seed: u64,
) -> Result<(f64, f64)> {
    if samples < 100_000 {
        return Err(DpError::InvalidParameter(format!(
            "at least 1e5 samples required, got {samples}"
        )));
    }
    let (mean, variance) = leakage_distribution(setting);
    let sd = variance.sqrt();
    let analytic = if headroom == f64::INFINITY {
        0.0
    } else if headroom == f64::NEG_INFINITY {
        1.0
    } else {
        1.0 - std_normal_cdf((headroom - mean) / sd)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let z: f64 = rng.sample(StandardNormal);
        if mean + sd * z > headroom {
            hits += 1;
        }
    }
    Ok((hits as f64 / samples as f64, analytic))
}
