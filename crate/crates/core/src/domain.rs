//! Core data model: databases and their neighbour relation, request/output
//! transcripts, mechanisms, and realized-leakage bookkeeping.
//!
//! Everything downstream (filters, verification, simulation) is built on the
//! types here. Leakage is measured in nats. Infinite leakage is a legitimate
//! value, not an error: the erasure construction depends on propagating it.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// The realized output has zero density under both databases of a pair,
    /// or +inf and -inf leakage met on the same cumulative entry.
    #[error("undefined leakage: {0}")]
    UndefinedLeakage(String),
    /// A mechanism offers neither a finite support nor an analytic tail.
    #[error("unsupported mechanism: {0}")]
    UnsupportedMechanism(String),
    #[error("transcript enumeration exceeded the atom budget of {0}")]
    AtomBudgetExceeded(usize),
    #[error("distributions were enumerated from different universes")]
    MismatchedUniverse,
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpError>;

/// Adversary request: the round-0 sentinel or a request id drawn from the
/// round's allowable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Request {
    Bottom,
    Id(u32),
}

/// Released output: the round-0 sentinel, a symbolic outcome of a discrete
/// mechanism, or a real-valued outcome of a continuous mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Output {
    Bottom,
    Symbol(u32),
    Real(f64),
}

impl Eq for Output {}

impl Ord for Output {
    fn cmp(&self, other: &Self) -> Ordering {
        use Output::*;
        match (self, other) {
            (Bottom, Bottom) => Ordering::Equal,
            (Bottom, _) => Ordering::Less,
            (_, Bottom) => Ordering::Greater,
            (Symbol(a), Symbol(b)) => a.cmp(b),
            (Symbol(_), Real(_)) => Ordering::Less,
            (Real(_), Symbol(_)) => Ordering::Greater,
            (Real(a), Real(b)) => a.total_cmp(b),
        }
    }
}

impl PartialOrd for Output {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Finite set of databases with a symmetric, irreflexive neighbour relation.
///
/// Ordered neighbour pairs are materialized with the two orientations of each
/// unordered pair adjacent, so the reverse of pair index `k` is `k ^ 1`.
#[derive(Debug, Clone)]
pub struct DatabaseSpace {
    names: Vec<String>,
    ordered: Vec<(usize, usize)>,
}

impl DatabaseSpace {
    pub fn new(names: Vec<String>, neighbours: &[(usize, usize)]) -> Result<Self> {
        if names.is_empty() {
            return Err(DpError::InvalidParameter("no databases declared".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut ordered = Vec::with_capacity(neighbours.len() * 2);
        for &(a, b) in neighbours {
            if a >= names.len() || b >= names.len() {
                return Err(DpError::InvalidParameter(format!(
                    "neighbour pair ({a}, {b}) references an unknown database"
                )));
            }
            if a == b {
                return Err(DpError::InvalidParameter(format!(
                    "neighbour relation must be irreflexive, got ({a}, {a})"
                )));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                continue;
            }
            ordered.push((a, b));
            ordered.push((b, a));
        }
        if ordered.is_empty() {
            return Err(DpError::InvalidParameter("no neighbour pairs declared".into()));
        }
        Ok(Self { names, ordered })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, db: usize) -> &str {
        &self.names[db]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All ordered neighbour pairs; the reverse of index `k` is `k ^ 1`.
    pub fn ordered_pairs(&self) -> &[(usize, usize)] {
        &self.ordered
    }
}

/// Interleaved request/output history. Round 0 holds the sentinel pair
/// (Bottom, Bottom). A transcript is `full` when every pushed request has a
/// matching output and `partial` when the latest request is still unanswered.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Transcript {
    requests: Vec<Request>,
    outputs: Vec<Output>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Transcript already containing the round-0 sentinel exchange.
    pub fn with_sentinel() -> Self {
        let mut t = Self::new();
        t.push_request(Request::Bottom);
        t.push_output(Output::Bottom);
        t
    }

    pub fn push_request(&mut self, r: Request) {
        assert_eq!(
            self.requests.len(),
            self.outputs.len(),
            "previous round still awaiting an output"
        );
        self.requests.push(r);
    }

    pub fn push_output(&mut self, y: Output) {
        assert_eq!(
            self.requests.len(),
            self.outputs.len() + 1,
            "no pending request to answer"
        );
        self.outputs.push(y);
    }

    /// Removes the latest unanswered request (used when a pre-release rule
    /// rejects a round before its mechanism executes).
    pub fn pop_request(&mut self) {
        assert_eq!(self.requests.len(), self.outputs.len() + 1);
        self.requests.pop();
    }

    /// Removes the latest output, reopening its round. Enumeration and the
    /// look-ahead check use push/pop to explore candidate continuations.
    pub fn pop_output(&mut self) {
        assert!(self.is_full() && !self.outputs.is_empty());
        self.outputs.pop();
    }

    pub fn is_full(&self) -> bool {
        self.requests.len() == self.outputs.len()
    }

    /// Number of released outputs. With the sentinel present, `rounds() - 1`
    /// equals the index of the latest released round.
    pub fn rounds(&self) -> usize {
        self.outputs.len()
    }

    pub fn request(&self, round: usize) -> Request {
        self.requests[round]
    }

    pub fn output(&self, round: usize) -> Output {
        self.outputs[round]
    }

    pub fn outputs(&self) -> &[Output] {
        &self.outputs
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }
}

/// Target differential-privacy budget (epsilon in nats).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(DpError::InvalidParameter(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(DpError::InvalidParameter(format!(
                "delta must lie in [0, 1], got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Conditioning context for one round of one mechanism: the round index, the
/// accepted request, and the strictly earlier history (full through round-1).
#[derive(Debug, Clone, Copy)]
pub struct RoundCtx<'a> {
    pub round: usize,
    pub request: Request,
    pub history: &'a Transcript,
}

/// Per-round conditional output distribution given partial transcript and
/// database.
///
/// `support` returning `None` marks a continuous-output mechanism; such
/// mechanisms must provide `output_cdf`, `domain`, and `leakage_tail` for the
/// look-ahead check to be computable.
pub trait Mechanism: Send + Sync {
    /// Finite output support (discrete mechanisms), independent of the
    /// database so the released value itself does not narrow the universe.
    fn support(&self, ctx: &RoundCtx) -> Option<Vec<Output>>;

    /// Natural log of the pmf/pdf of `y` under `db`; `-inf` when outside the
    /// support.
    fn log_density(&self, ctx: &RoundCtx, db: usize, y: &Output) -> f64;

    fn sample(&self, ctx: &RoundCtx, db: usize, rng: &mut dyn RngCore) -> Output;

    /// Exact output probability for discrete mechanisms. Preferred over
    /// `log_density(..).exp()` where boundary comparisons must not lose the
    /// round trip through logs.
    fn prob(&self, _ctx: &RoundCtx, _db: usize, _y: &Output) -> Option<f64> {
        None
    }

    /// Analytic tail P_x(L > threshold | ctx) of this round's leakage for the
    /// ordered pair, when available in closed form.
    fn leakage_tail(&self, _ctx: &RoundCtx, _pair: (usize, usize), _threshold: f64) -> Option<f64> {
        None
    }

    /// CDF of the real-valued output under `db` (continuous mechanisms only).
    fn output_cdf(&self, _ctx: &RoundCtx, _db: usize, _y: f64) -> Option<f64> {
        None
    }

    /// Interval carrying all but a negligible sliver of the output mass under
    /// `db` (continuous mechanisms only).
    fn domain(&self, _ctx: &RoundCtx, _db: usize) -> Option<(f64, f64)> {
        None
    }
}

/// Realized leakage of `y` for the ordered pair, in nats:
/// `log density under x  -  log density under x'`.
///
/// Zero density under x with positive density under x' yields `-inf`; the
/// reverse yields `+inf`; zero under both is an error (the output lies outside
/// the instance entirely).
pub fn step_leakage(
    mechanism: &dyn Mechanism,
    ctx: &RoundCtx,
    pair: (usize, usize),
    y: &Output,
) -> Result<f64> {
    let lx = mechanism.log_density(ctx, pair.0, y);
    let lxp = mechanism.log_density(ctx, pair.1, y);
    if lx == f64::NEG_INFINITY && lxp == f64::NEG_INFINITY {
        return Err(DpError::UndefinedLeakage(format!(
            "output {y:?} has zero density under both databases of pair {pair:?}"
        )));
    }
    Ok(lx - lxp)
}

/// Cumulative realized leakage `l^(i)(x, x')` per ordered neighbour pair.
///
/// Entries are exactly antisymmetric: both orientations accumulate the same
/// realized outputs, and IEEE round-to-nearest gives `fl(a-b) = -fl(b-a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageLedger {
    cumulative: Vec<f64>,
    round_index: usize,
}

impl LeakageLedger {
    pub fn new(space: &DatabaseSpace) -> Self {
        Self {
            cumulative: vec![0.0; space.ordered_pairs().len()],
            round_index: 0,
        }
    }

    pub fn round_index(&self) -> usize {
        self.round_index
    }

    pub fn entry(&self, pair_index: usize) -> f64 {
        self.cumulative[pair_index]
    }

    pub fn entries(&self) -> &[f64] {
        &self.cumulative
    }

    /// Adds one round's per-pair leakages and advances the round index.
    /// Opposite infinities on one entry mean the transcript is impossible
    /// under one database of the pair while already impossible under the
    /// other; the cumulative value would be meaningless.
    pub fn accumulate_steps(&mut self, steps: &[f64]) -> Result<()> {
        assert_eq!(steps.len(), self.cumulative.len());
        for (c, &s) in self.cumulative.iter_mut().zip(steps) {
            if (*c == f64::INFINITY && s == f64::NEG_INFINITY)
                || (*c == f64::NEG_INFINITY && s == f64::INFINITY)
            {
                return Err(DpError::UndefinedLeakage(
                    "opposite infinite leakages met on one cumulative entry".into(),
                ));
            }
            *c += s;
        }
        self.round_index += 1;
        Ok(())
    }

    /// Overrides the ledger state (synthetic states for equivalence tests).
    pub fn set_entries(&mut self, entries: &[f64], round_index: usize) {
        assert_eq!(entries.len(), self.cumulative.len());
        self.cumulative.copy_from_slice(entries);
        self.round_index = round_index;
    }
}

/// Computes one round's leakage for every ordered pair and folds it into the
/// ledger. `ctx.history` is the transcript before this round; `y` the realized
/// output of `ctx.round`.
pub fn accumulate(
    ledger: &mut LeakageLedger,
    space: &DatabaseSpace,
    mechanism: &dyn Mechanism,
    ctx: &RoundCtx,
    y: &Output,
) -> Result<()> {
    let mut steps = Vec::with_capacity(space.ordered_pairs().len());
    for &pair in space.ordered_pairs() {
        steps.push(step_leakage(mechanism, ctx, pair, y)?);
    }
    ledger.accumulate_steps(&steps)
}

/// Deterministic request-selection callback. Randomized strategies can be
/// modeled by fixing their coin flips into distinct deterministic strategies.
pub trait AdversaryStrategy: Send + Sync {
    /// Chooses the request for `round` (1-based; round 0 is the sentinel) from
    /// `allowed`, given the full transcript so far.
    fn next_request(&self, round: usize, history: &Transcript, allowed: &[Request]) -> Request;
}

/// Strategy issuing a fixed request sequence regardless of outputs.
#[derive(Debug, Clone)]
pub struct FixedStrategy {
    pub requests: Vec<Request>,
}

impl AdversaryStrategy for FixedStrategy {
    fn next_request(&self, round: usize, _history: &Transcript, allowed: &[Request]) -> Request {
        let r = self.requests[(round - 1).min(self.requests.len() - 1)];
        debug_assert!(allowed.contains(&r), "fixed strategy chose a disallowed request");
        r
    }
}

/// Strategy that issues `base` until it has seen `trigger` released, then
/// switches to `after`. Exercises output-adaptive request choice.
#[derive(Debug, Clone)]
pub struct ReactiveStrategy {
    pub base: Request,
    pub trigger: Output,
    pub after: Request,
}

impl AdversaryStrategy for ReactiveStrategy {
    fn next_request(&self, _round: usize, history: &Transcript, allowed: &[Request]) -> Request {
        let fired = history.outputs().contains(&self.trigger);
        let r = if fired { self.after } else { self.base };
        debug_assert!(allowed.contains(&r), "reactive strategy chose a disallowed request");
        r
    }
}

/// One round of an instance: the allowable request set and the mechanism
/// serving it.
#[derive(Clone)]
pub struct RoundSpec {
    pub requests: Vec<Request>,
    pub mechanism: Arc<dyn Mechanism>,
}

/// A finite multi-round instance: the database space plus one `RoundSpec` per
/// real round (index 0 serves round 1).
#[derive(Clone)]
pub struct Instance {
    pub space: DatabaseSpace,
    pub rounds: Vec<RoundSpec>,
}

impl Instance {
    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Spec for 1-based round `i`.
    pub fn round_spec(&self, round: usize) -> &RoundSpec {
        &self.rounds[round - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::DiscreteTableMechanism;

    fn two_db_space() -> DatabaseSpace {
        DatabaseSpace::new(vec!["x".into(), "xp".into()], &[(0, 1)]).unwrap()
    }

    #[test]
    fn ordered_pairs_are_adjacent_reversals() {
        let s = DatabaseSpace::new(
            vec!["a".into(), "b".into(), "c".into()],
            &[(0, 1), (1, 2)],
        )
        .unwrap();
        let pairs = s.ordered_pairs();
        assert_eq!(pairs.len(), 4);
        for k in 0..pairs.len() {
            let (a, b) = pairs[k];
            assert_eq!(pairs[k ^ 1], (b, a));
        }
    }

    #[test]
    fn reflexive_neighbours_rejected() {
        assert!(DatabaseSpace::new(vec!["a".into(), "b".into()], &[(0, 0)]).is_err());
    }

    #[test]
    fn duplicate_unordered_pairs_collapse() {
        let s = DatabaseSpace::new(vec!["a".into(), "b".into()], &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(s.ordered_pairs().len(), 2);
    }

    #[test]
    fn transcript_sentinel_and_round_structure() {
        let mut t = Transcript::with_sentinel();
        assert!(t.is_full());
        assert_eq!(t.rounds(), 1);
        assert_eq!(t.request(0), Request::Bottom);
        assert_eq!(t.output(0), Output::Bottom);
        t.push_request(Request::Id(0));
        assert!(!t.is_full());
        t.push_output(Output::Symbol(1));
        assert!(t.is_full());
        assert_eq!(t.rounds(), 2);
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(1.0, 0.5).is_ok());
        assert!(PrivacyBudget::new(-0.1, 0.5).is_err());
        assert!(PrivacyBudget::new(1.0, 1.5).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn step_leakage_on_identical_distributions_is_zero() {
        let space = two_db_space();
        let mech = DiscreteTableMechanism::uniform_over(2, space.len());
        let hist = Transcript::with_sentinel();
        let ctx = RoundCtx { round: 1, request: Request::Id(0), history: &hist };
        for sym in 0..2 {
            let l = step_leakage(&mech, &ctx, (0, 1), &Output::Symbol(sym)).unwrap();
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn step_leakage_signed_infinities() {
        let space = two_db_space();
        // Under db 0 outcome 0 has mass 1; under db 1 outcome 1 has mass 1.
        let mech = DiscreteTableMechanism::from_rows(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let hist = Transcript::with_sentinel();
        let ctx = RoundCtx { round: 1, request: Request::Id(0), history: &hist };
        let up = step_leakage(&mech, &ctx, (0, 1), &Output::Symbol(0)).unwrap();
        assert_eq!(up, f64::INFINITY);
        let down = step_leakage(&mech, &ctx, (0, 1), &Output::Symbol(1)).unwrap();
        assert_eq!(down, f64::NEG_INFINITY);
        let _ = space;
    }

    #[test]
    fn step_leakage_zero_under_both_is_error() {
        let mech =
            DiscreteTableMechanism::from_rows(3, vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0]]);
        let hist = Transcript::with_sentinel();
        let ctx = RoundCtx { round: 1, request: Request::Id(0), history: &hist };
        assert!(step_leakage(&mech, &ctx, (0, 1), &Output::Symbol(2)).is_err());
    }

    #[test]
    fn ledger_accumulates_antisymmetrically() {
        let space = two_db_space();
        let mech = DiscreteTableMechanism::from_rows(2, vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
        let mut ledger = LeakageLedger::new(&space);
        let mut t = Transcript::with_sentinel();
        for round in 1..=3 {
            let ctx = RoundCtx { round, request: Request::Id(0), history: &t.clone() };
            let y = Output::Symbol((round % 2) as u32);
            accumulate(&mut ledger, &space, &mech, &ctx, &y).unwrap();
            t.push_request(Request::Id(0));
            t.push_output(y);
        }
        assert_eq!(ledger.round_index(), 3);
        assert_eq!(ledger.entry(0), -ledger.entry(1));
    }

    #[test]
    fn ledger_rejects_opposite_infinities() {
        let space = two_db_space();
        let mut ledger = LeakageLedger::new(&space);
        ledger.accumulate_steps(&[f64::INFINITY, f64::NEG_INFINITY]).unwrap();
        let err = ledger.accumulate_steps(&[f64::NEG_INFINITY, f64::INFINITY]);
        assert!(err.is_err());
    }

    #[test]
    fn ledger_same_sign_infinities_stick() {
        let space = two_db_space();
        let mut ledger = LeakageLedger::new(&space);
        ledger.accumulate_steps(&[f64::INFINITY, f64::NEG_INFINITY]).unwrap();
        ledger.accumulate_steps(&[f64::INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_eq!(ledger.entry(0), f64::INFINITY);
        assert_eq!(ledger.entry(1), f64::NEG_INFINITY);
    }

    #[test]
    fn output_ordering_is_total() {
        let mut v = vec![
            Output::Real(1.5),
            Output::Bottom,
            Output::Symbol(2),
            Output::Real(-3.0),
            Output::Symbol(0),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                Output::Bottom,
                Output::Symbol(0),
                Output::Symbol(2),
                Output::Real(-3.0),
                Output::Real(1.5),
            ]
        );
    }
}
