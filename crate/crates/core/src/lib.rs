//! Realisation-level differential privacy filters for adaptive mechanism
//! composition, plus the mechanism-level baselines they are measured
//! against.
//!
//! The central object is an interactive protocol: an analyst adaptively
//! picks a request each round, a noisy mechanism answers, and a filter
//! decides after each release whether the *next* round is still safe. The
//! look-ahead filter here bounds the realised privacy loss of the whole
//! transcript rather than summing worst-case per-round budgets, which lets
//! it run for many more rounds at the same (epsilon, delta).
//!
//! Module map:
//! - [`domain`]: databases, transcripts, mechanisms, leakage bookkeeping.
//! - [`gaussian`]: normal CDF/quantile, the closed-form release threshold
//!   for i.i.d. Gaussian queries, the exact Gaussian privacy curve, and the
//!   (delta_tilde, theta) optimizer.
//! - [`mechanisms`]: Gaussian counting, finite table, and erasure channels.
//! - [`mech_filters`]: additive, concentrated-sum and Renyi composition
//!   filters with their worst-case stopping times.
//! - [`realisation`]: the look-ahead filter itself, a pre-release variant
//!   that leaks through conditioning, and transcript-level loss accounting.
//! - [`verify`]: exact transcript enumeration and brute-force DP checking.
//! - [`instance`]: a small text format describing finite protocol instances.
//! - [`sim`]: seeded Monte Carlo survival curves for filter comparisons.

// Validation guards use `!(x > 0.0)` so that NaN fails them too, and the
// quantile coefficient tables keep their published digits verbatim.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::excessive_precision)]

pub mod domain;
pub mod gaussian;
pub mod instance;
pub mod mech_filters;
pub mod mechanisms;
pub mod realisation;
pub mod sim;
pub mod verify;

pub use domain::{
    AdversaryStrategy, DatabaseSpace, DpError, FixedStrategy, Instance, LeakageLedger, Mechanism,
    Output, PrivacyBudget, ReactiveStrategy, Request, Result, RoundCtx, RoundSpec, Transcript,
};
pub use gaussian::{kappa, optimize_params, FilterParams, GaussianSetting};
pub use instance::{load_instance, parse_instance_str, InstanceFile};
pub use mech_filters::{stopping_time_additive, stopping_time_advanced, stopping_time_rdp};
pub use realisation::{naive_filter_run, run_filter, FilterRun, HaltPolicy};
pub use sim::{simulate_survival, SimConfig, SurvivalCurve};
pub use verify::{dp_gap, enumerate_transcripts, TranscriptDistribution};
