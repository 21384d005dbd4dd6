//! Concrete mechanisms: finite distribution tables, the binary erasure
//! mechanism, and the Gaussian counting-query mechanism.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::{DpError, Mechanism, Output, Request, Result, RoundCtx};
use crate::gaussian::std_normal_cdf;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Uniform double in [0, 1) from the top 53 bits of one `u64` draw. Used for
/// all discrete sampling so output bytes depend only on the RNG stream.
pub(crate) fn uniform_f64(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn validate_row(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(DpError::InvalidParameter(format!(
            "probabilities must lie in [0, 1], got {probs:?}"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(DpError::InvalidParameter(format!(
            "probabilities must sum to 1 within {NORMALIZATION_TOL:e}, got {sum}"
        )));
    }
    Ok(())
}

fn sample_row(probs: &[f64], rng: &mut dyn RngCore) -> u32 {
    let u = uniform_f64(rng);
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u32;
        }
    }
    // Rounding pushed the partial sums below u; last positive entry wins.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1) as u32
}

/// Key for the previous released output when a table row conditions on it:
/// the symbol value, or `u32::MAX` for the round-0 sentinel.
type PrevKey = u32;

const PREV_BOTTOM: PrevKey = u32::MAX;

enum TableShape {
    /// One row per database; identical across rounds and requests.
    Shared(Vec<Vec<f64>>),
    /// Rows keyed by (round, request id, db); the instance-file layout.
    Keyed(BTreeMap<(u32, u32, u32), Vec<f64>>),
    /// Rows keyed by (request id, db, previous output); output-adaptive
    /// mechanisms for the pure-DP comparisons.
    PerReqDbPrev(BTreeMap<(u32, u32, PrevKey), Vec<f64>>),
}

/// Finite-support mechanism backed by explicit probability tables. Outputs
/// are `Output::Symbol(0..n_symbols)`.
pub struct DiscreteTableMechanism {
    n_symbols: u32,
    shape: TableShape,
}

impl DiscreteTableMechanism {
    /// Same distribution for every database: the uniform law on `n_symbols`
    /// outcomes (zero leakage always).
    pub fn uniform_over(n_symbols: u32, n_dbs: usize) -> Self {
        let row = vec![1.0 / n_symbols as f64; n_symbols as usize];
        Self {
            n_symbols,
            shape: TableShape::Shared(vec![row; n_dbs]),
        }
    }

    /// One row per database, used for every round and request. Panics on
    /// malformed rows; use `try_from_rows` for fallible construction.
    pub fn from_rows(n_symbols: u32, rows: Vec<Vec<f64>>) -> Self {
        Self::try_from_rows(n_symbols, rows).expect("malformed probability rows")
    }

    pub fn try_from_rows(n_symbols: u32, rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in &rows {
            if row.len() != n_symbols as usize {
                return Err(DpError::InvalidParameter(
                    "row length does not match the symbol count".into(),
                ));
            }
            validate_row(row)?;
        }
        Ok(Self { n_symbols, shape: TableShape::Shared(rows) })
    }

    /// Builder for per-(round, request, database) rows.
    pub fn builder(n_symbols: u32) -> TableBuilder {
        TableBuilder { n_symbols, rows: BTreeMap::new() }
    }

    /// Builder for per-(request, database, previous-output) rows.
    pub fn conditioned_builder(n_symbols: u32) -> ConditionedBuilder {
        ConditionedBuilder { n_symbols, rows: BTreeMap::new() }
    }

    pub fn n_symbols(&self) -> u32 {
        self.n_symbols
    }

    fn row(&self, ctx: &RoundCtx, db: usize) -> &[f64] {
        let req = match ctx.request {
            Request::Id(r) => r,
            Request::Bottom => panic!("real round served with the sentinel request"),
        };
        match &self.shape {
            TableShape::Shared(rows) => &rows[db],
            TableShape::Keyed(rows) => rows
                .get(&(ctx.round as u32, req, db as u32))
                .unwrap_or_else(|| {
                    panic!(
                        "no table row for round {}, request {}, database {}",
                        ctx.round, req, db
                    )
                }),
            TableShape::PerReqDbPrev(rows) => {
                let prev = match ctx.history.output(ctx.round - 1) {
                    Output::Bottom => PREV_BOTTOM,
                    Output::Symbol(s) => s,
                    Output::Real(_) => panic!("table mechanism conditioned on a real output"),
                };
                rows.get(&(req, db as u32, prev)).unwrap_or_else(|| {
                    panic!(
                        "no table row for request {}, database {}, previous output {}",
                        req, db, prev
                    )
                })
            }
        }
    }
}

pub struct TableBuilder {
    n_symbols: u32,
    rows: BTreeMap<(u32, u32, u32), Vec<f64>>,
}

impl TableBuilder {
    pub fn row(mut self, round: u32, request: u32, db: u32, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != self.n_symbols as usize {
            return Err(DpError::InvalidParameter(
                "row length does not match the symbol count".into(),
            ));
        }
        validate_row(&probs)?;
        if self.rows.insert((round, request, db), probs).is_some() {
            return Err(DpError::InvalidParameter(format!(
                "duplicate table row for round {round}, request {request}, database {db}"
            )));
        }
        Ok(self)
    }

    pub fn build(self) -> DiscreteTableMechanism {
        DiscreteTableMechanism {
            n_symbols: self.n_symbols,
            shape: TableShape::Keyed(self.rows),
        }
    }
}

pub struct ConditionedBuilder {
    n_symbols: u32,
    rows: BTreeMap<(u32, u32, PrevKey), Vec<f64>>,
}

impl ConditionedBuilder {
    /// `prev = None` keys the row on the round-0 sentinel.
    pub fn row(
        mut self,
        request: u32,
        db: u32,
        prev: Option<u32>,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != self.n_symbols as usize {
            return Err(DpError::InvalidParameter(
                "row length does not match the symbol count".into(),
            ));
        }
        validate_row(&probs)?;
        let key = (request, db, prev.unwrap_or(PREV_BOTTOM));
        if self.rows.insert(key, probs).is_some() {
            return Err(DpError::InvalidParameter(
                "duplicate conditioned table row".into(),
            ));
        }
        Ok(self)
    }

    pub fn build(self) -> DiscreteTableMechanism {
        DiscreteTableMechanism {
            n_symbols: self.n_symbols,
            shape: TableShape::PerReqDbPrev(self.rows),
        }
    }
}

impl Mechanism for DiscreteTableMechanism {
    fn support(&self, _ctx: &RoundCtx) -> Option<Vec<Output>> {
        Some((0..self.n_symbols).map(Output::Symbol).collect())
    }

    fn log_density(&self, ctx: &RoundCtx, db: usize, y: &Output) -> f64 {
        match y {
            Output::Symbol(s) if *s < self.n_symbols => {
                let p = self.row(ctx, db)[*s as usize];
                if p > 0.0 {
                    p.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            _ => f64::NEG_INFINITY,
        }
    }

    fn sample(&self, ctx: &RoundCtx, db: usize, rng: &mut dyn RngCore) -> Output {
        Output::Symbol(sample_row(self.row(ctx, db), rng))
    }

    fn prob(&self, ctx: &RoundCtx, db: usize, y: &Output) -> Option<f64> {
        match y {
            Output::Symbol(s) if *s < self.n_symbols => {
                Some(self.row(ctx, db)[*s as usize])
            }
            _ => Some(0.0),
        }
    }
}

/// The binary erasure mechanism: with probability `p` the output reveals the
/// database identity, otherwise it releases the uninformative `Bottom`.
/// Request id 0 queries; request id 1 (when enabled) skips, releasing
/// `Bottom` under every database.
pub struct ErasureMechanism {
    p: f64,
    n_dbs: usize,
    allow_skip: bool,
}

impl ErasureMechanism {
    pub fn new(p: f64, n_dbs: usize, allow_skip: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(DpError::InvalidParameter(format!(
                "reveal probability must lie in [0, 1], got {p}"
            )));
        }
        Ok(Self { p, n_dbs, allow_skip })
    }

    pub fn reveal_probability(&self) -> f64 {
        self.p
    }

    fn is_skip(&self, ctx: &RoundCtx) -> bool {
        self.allow_skip && ctx.request == Request::Id(1)
    }
}

impl Mechanism for ErasureMechanism {
    fn support(&self, _ctx: &RoundCtx) -> Option<Vec<Output>> {
        let mut s = vec![Output::Bottom];
        s.extend((0..self.n_dbs as u32).map(Output::Symbol));
        Some(s)
    }

    fn log_density(&self, ctx: &RoundCtx, db: usize, y: &Output) -> f64 {
        if self.is_skip(ctx) {
            return match y {
                Output::Bottom => 0.0,
                _ => f64::NEG_INFINITY,
            };
        }
        match y {
            Output::Bottom => (1.0 - self.p).ln(),
            Output::Symbol(s) if *s as usize == db => self.p.ln(),
            _ => f64::NEG_INFINITY,
        }
    }

    fn sample(&self, ctx: &RoundCtx, db: usize, rng: &mut dyn RngCore) -> Output {
        if self.is_skip(ctx) {
            return Output::Bottom;
        }
        if uniform_f64(rng) < self.p {
            Output::Symbol(db as u32)
        } else {
            Output::Bottom
        }
    }

    fn prob(&self, ctx: &RoundCtx, db: usize, y: &Output) -> Option<f64> {
        if self.is_skip(ctx) {
            return Some(if *y == Output::Bottom { 1.0 } else { 0.0 });
        }
        Some(match y {
            Output::Bottom => 1.0 - self.p,
            Output::Symbol(s) if *s as usize == db => self.p,
            _ => 0.0,
        })
    }
}

/// The i.i.d. Gaussian counting-query mechanism: `Y = r(x) + Z`,
/// `Z ~ N(0, sigma^2)`, with `r` given per database.
pub struct GaussianCountingMechanism {
    sigma: f64,
    means: Vec<f64>,
}

impl GaussianCountingMechanism {
    pub fn new(sigma: f64, means: Vec<f64>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(DpError::InvalidParameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma, means })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self, db: usize) -> f64 {
        self.means[db]
    }
}

impl Mechanism for GaussianCountingMechanism {
    fn support(&self, _ctx: &RoundCtx) -> Option<Vec<Output>> {
        None
    }

    fn log_density(&self, _ctx: &RoundCtx, db: usize, y: &Output) -> f64 {
        let y = match y {
            Output::Real(v) => *v,
            _ => return f64::NEG_INFINITY,
        };
        let z = (y - self.means[db]) / self.sigma;
        -0.5 * z * z - (self.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }

    fn sample(&self, _ctx: &RoundCtx, db: usize, rng: &mut dyn RngCore) -> Output {
        let z: f64 = StandardNormal.sample(rng);
        Output::Real(self.means[db] + self.sigma * z)
    }

    /// Tail of the per-round leakage: for mean gap `d = r(x) - r(x')`, the
    /// leakage under P_x is N(d^2/(2 sigma^2), d^2/sigma^2).
    fn leakage_tail(&self, _ctx: &RoundCtx, pair: (usize, usize), threshold: f64) -> Option<f64> {
        let d = self.means[pair.0] - self.means[pair.1];
        if d == 0.0 {
            // Leakage is identically zero.
            return Some(if threshold < 0.0 { 1.0 } else { 0.0 });
        }
        if threshold == f64::INFINITY {
            return Some(0.0);
        }
        if threshold == f64::NEG_INFINITY {
            return Some(1.0);
        }
        let s = d.abs();
        let mean = d * d / (2.0 * self.sigma * self.sigma);
        let sd = s / self.sigma;
        Some(1.0 - std_normal_cdf((threshold - mean) / sd))
    }

    fn output_cdf(&self, _ctx: &RoundCtx, db: usize, y: f64) -> Option<f64> {
        Some(std_normal_cdf((y - self.means[db]) / self.sigma))
    }

    fn domain(&self, _ctx: &RoundCtx, db: usize) -> Option<(f64, f64)> {
        let m = self.means[db];
        Some((m - 13.5 * self.sigma, m + 13.5 * self.sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Transcript;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx_with<'a>(hist: &'a Transcript, request: Request) -> RoundCtx<'a> {
        RoundCtx { round: 1, request, history: hist }
    }

    #[test]
    fn table_rows_normalize() {
        assert!(DiscreteTableMechanism::try_from_rows(2, vec![vec![0.6, 0.4]]).is_ok());
        assert!(DiscreteTableMechanism::try_from_rows(2, vec![vec![0.6, 0.5]]).is_err());
        assert!(DiscreteTableMechanism::try_from_rows(2, vec![vec![1.2, -0.2]]).is_err());
    }

    #[test]
    fn table_density_exponentiates_to_mass() {
        let mech = DiscreteTableMechanism::from_rows(3, vec![vec![0.2, 0.3, 0.5]]);
        let hist = Transcript::with_sentinel();
        let ctx = ctx_with(&hist, Request::Id(0));
        let total: f64 = (0..3)
            .map(|s| mech.log_density(&ctx, 0, &Output::Symbol(s)).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_sampling_matches_masses() {
        let mech = DiscreteTableMechanism::from_rows(2, vec![vec![0.25, 0.75]]);
        let hist = Transcript::with_sentinel();
        let ctx = ctx_with(&hist, Request::Id(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut ones = 0u64;
        for _ in 0..n {
            if mech.sample(&ctx, 0, &mut rng) == Output::Symbol(1) {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.005, "freq = {freq}");
    }

    #[test]
    fn erasure_densities() {
        let mech = ErasureMechanism::new(0.1, 2, true).unwrap();
        let hist = Transcript::with_sentinel();
        let ctx = ctx_with(&hist, Request::Id(0));
        assert!((mech.log_density(&ctx, 0, &Output::Bottom).exp() - 0.9).abs() < 1e-12);
        assert!((mech.log_density(&ctx, 0, &Output::Symbol(0)).exp() - 0.1).abs() < 1e-12);
        assert_eq!(mech.log_density(&ctx, 0, &Output::Symbol(1)), f64::NEG_INFINITY);
        // Skip request: Bottom almost surely under every database.
        let skip = ctx_with(&hist, Request::Id(1));
        assert_eq!(mech.log_density(&skip, 0, &Output::Bottom), 0.0);
        assert_eq!(mech.log_density(&skip, 0, &Output::Symbol(0)), f64::NEG_INFINITY);
    }

    #[test]
    fn gaussian_density_is_normalized_enough() {
        let mech = GaussianCountingMechanism::new(2.0, vec![0.0, 1.0]).unwrap();
        let hist = Transcript::with_sentinel();
        let ctx = ctx_with(&hist, Request::Id(0));
        // Trapezoid over a wide grid.
        let (lo, hi) = mech.domain(&ctx, 0).unwrap();
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for k in 0..=n {
            let y = lo + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            total += w * mech.log_density(&ctx, 0, &Output::Real(y)).exp();
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-9, "integral = {total}");
    }

    #[test]
    fn gaussian_leakage_tail_at_mean_is_half() {
        let mech = GaussianCountingMechanism::new(2.0, vec![1.0, 0.0]).unwrap();
        let hist = Transcript::with_sentinel();
        let ctx = ctx_with(&hist, Request::Id(0));
        let tail = mech.leakage_tail(&ctx, (0, 1), 1.0 / 8.0).unwrap();
        assert!((tail - 0.5).abs() < 1e-12);
        assert_eq!(mech.leakage_tail(&ctx, (0, 1), f64::INFINITY).unwrap(), 0.0);
        assert_eq!(mech.leakage_tail(&ctx, (0, 1), f64::NEG_INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_output_midpoint_has_zero_leakage() {
        let mech = GaussianCountingMechanism::new(2.0, vec![0.0, 1.0]).unwrap();
        let hist = Transcript::with_sentinel();
        let ctx = ctx_with(&hist, Request::Id(0));
        let l = crate::domain::step_leakage(&mech, &ctx, (0, 1), &Output::Real(0.5)).unwrap();
        assert!(l.abs() < 1e-15);
    }
}
