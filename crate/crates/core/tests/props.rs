//! Randomized invariants: each property states a structural fact the rest
//! of the crate relies on, exercised over generated inputs.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dp_filters::domain::{
    DatabaseSpace, FixedStrategy, Instance, PrivacyBudget, Request, RoundSpec,
};
use dp_filters::gaussian::{
    gaussian_curve_delta, gaussian_privacy_curve, kappa, optimize_params, quantile_sum_objective,
    std_normal_cdf, std_normal_quantile, FilterParams, GaussianSetting,
};
use dp_filters::mechanisms::DiscreteTableMechanism;
use dp_filters::realisation::{full_transcript_leakage, run_filter, HaltPolicy};
use dp_filters::sim::{emit_csv, parse_csv, simulate_survival, FilterKind, SimConfig};
use dp_filters::verify::{dp_gap, enumerate_transcripts};

/// Row tables with every probability bounded away from zero, shaped
/// `[round][db][output]`, plus the dimensions that produced them.
fn table_instances() -> impl Strategy<Value = (usize, u32, Vec<Vec<Vec<f64>>>)> {
    (2..=3usize, 2..=3u32, 1..=3usize).prop_flat_map(|(dbs, outs, rounds)| {
        let cells = prop::collection::vec(
            prop::collection::vec(
                prop::collection::vec(0.05..1.0f64, outs as usize),
                dbs,
            ),
            rounds,
        );
        cells.prop_map(move |t| (dbs, outs, t))
    })
}

fn build_instance(dbs: usize, outs: u32, table: &[Vec<Vec<f64>>]) -> Instance {
    let names = (0..dbs).map(|i| format!("db{i}")).collect::<Vec<_>>();
    let pairs: Vec<(usize, usize)> = (1..dbs).map(|i| (i - 1, i)).collect();
    let space = DatabaseSpace::new(names, &pairs).unwrap();
    let rounds = table
        .iter()
        .map(|per_db| {
            let rows = per_db
                .iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    row.iter().map(|p| p / total).collect()
                })
                .collect();
            RoundSpec {
                requests: vec![Request::Id(0)],
                mechanism: Arc::new(DiscreteTableMechanism::try_from_rows(outs, rows).unwrap()),
            }
        })
        .collect();
    Instance { space, rounds }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every ledger snapshot of a run satisfies l[k] == -l[k ^ 1] exactly:
    /// leakage is an antisymmetric function of the ordered pair.
    #[test]
    fn ledger_snapshots_are_antisymmetric(
        (dbs, outs, table) in table_instances(),
        seed in any::<u64>(),
    ) {
        let inst = build_instance(dbs, outs, &table);
        let b = PrivacyBudget::new(1.0, 1.0).unwrap();
        let params = FilterParams::new(1.0, 1.0, inst.n_rounds(), &b).unwrap();
        let strategy = FixedStrategy { requests: vec![Request::Id(0)] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = run_filter(
            &inst, &b, &params, HaltPolicy::KappaThreshold(f64::INFINITY),
            &strategy, 0, &mut rng,
        ).unwrap();
        for snapshot in &run.ledger_trajectory {
            for k in (0..snapshot.len()).step_by(2) {
                prop_assert_eq!(snapshot[k], -snapshot[k + 1]);
            }
        }
    }

    /// Summing per-round leakage along a transcript reproduces the log
    /// ratio of the two enumerated transcript probabilities.
    #[test]
    fn replayed_leakage_telescopes_to_enumerated_ratio(
        (dbs, outs, table) in table_instances(),
    ) {
        let inst = build_instance(dbs, outs, &table);
        let b = PrivacyBudget::new(1.0, 1.0).unwrap();
        let params = FilterParams::new(1.0, 1.0, inst.n_rounds(), &b).unwrap();
        let strategy = FixedStrategy { requests: vec![Request::Id(0)] };
        let dists: Vec<_> = (0..2).map(|db| enumerate_transcripts(
            &inst, &b, &params, HaltPolicy::KappaThreshold(f64::INFINITY),
            &strategy, db,
        ).unwrap()).collect();
        for (atom, &px) in dists[0].atoms() {
            let ratio = (px / dists[1].prob(atom)).ln();
            let replayed = full_transcript_leakage(&inst, atom, 0).unwrap();
            prop_assert!((ratio - replayed).abs() <= 1e-9,
                "ratio {ratio} vs replayed {replayed}");
        }
    }

    /// A distribution never violates differential privacy against itself,
    /// and relaxing epsilon never increases the violation mass.
    #[test]
    fn dp_gap_is_zero_on_self_and_monotone_in_epsilon(
        (dbs, outs, table) in table_instances(),
        eps_lo in 0.0..2.0f64,
        bump in 0.0..2.0f64,
    ) {
        let inst = build_instance(dbs, outs, &table);
        let b = PrivacyBudget::new(1.0, 1.0).unwrap();
        let params = FilterParams::new(1.0, 1.0, inst.n_rounds(), &b).unwrap();
        let strategy = FixedStrategy { requests: vec![Request::Id(0)] };
        let dists: Vec<_> = (0..2).map(|db| enumerate_transcripts(
            &inst, &b, &params, HaltPolicy::KappaThreshold(f64::INFINITY),
            &strategy, db,
        ).unwrap()).collect();
        prop_assert_eq!(dp_gap(&dists[0], &dists[0], eps_lo).unwrap(), 0.0);
        let wide = dp_gap(&dists[0], &dists[1], eps_lo).unwrap();
        let tight = dp_gap(&dists[0], &dists[1], eps_lo + bump).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&wide));
        prop_assert!(tight <= wide + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The standard normal CDF and quantile invert each other to 1e-10
    /// across twelve orders of magnitude of tail mass.
    #[test]
    fn normal_cdf_and_quantile_are_inverse(exponent in -8.0..-0.302f64, flip in any::<bool>()) {
        let p = if flip { 1.0 - 10f64.powf(exponent) } else { 10f64.powf(exponent) };
        let back = std_normal_cdf(std_normal_quantile(p));
        prop_assert!((back - p).abs() <= 1e-10, "p {p}, back {back}");
    }

    /// The exact per-release privacy curve is strictly positive below its
    /// zero-epsilon value, decreasing, and inverted correctly.
    #[test]
    fn privacy_curve_and_inverse_agree(
        sigma in 0.5..4.0f64,
        eps in 0.01..6.0f64,
        bump in 0.01..2.0f64,
    ) {
        let setting = GaussianSetting::new(sigma, 1.0).unwrap();
        let d1 = gaussian_curve_delta(&setting, eps);
        let d2 = gaussian_curve_delta(&setting, eps + bump);
        prop_assert!(d2 <= d1 + 1e-15);
        if d1 > 1e-14 {
            let eps_back = gaussian_privacy_curve(&setting, d1).unwrap();
            prop_assert!((eps_back - eps).abs() <= 1e-6,
                "eps {eps}, reconstructed {eps_back}");
        }
    }

    /// The release threshold grows with the total budget and shrinks as
    /// the per-round noise scale drops.
    #[test]
    fn release_threshold_moves_with_budget_and_noise(
        sigma in 0.5..4.0f64,
        eps in 1.0..10.0f64,
        bump in 0.1..3.0f64,
    ) {
        let b = PrivacyBudget::new(eps, 1e-3).unwrap();
        let params = FilterParams::new(2e-4, 1e-5, 16, &b).unwrap();
        let s1 = GaussianSetting::new(sigma, 1.0).unwrap();
        let s2 = GaussianSetting::new(sigma + bump, 1.0).unwrap();
        prop_assert!(kappa(eps + bump, &s1, &params) > kappa(eps, &s1, &params));
        prop_assert!(kappa(eps, &s2, &params) > kappa(eps, &s1, &params));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The optimizer output is feasible and no random feasible split beats
    /// its objective.
    #[test]
    fn optimizer_dominates_random_feasible_splits(
        rounds in 2..=60usize,
        delta_exp in -5.0..-2.0f64,
        fractions in prop::collection::vec(0.001..0.999f64, 8),
    ) {
        let delta = 10f64.powf(delta_exp);
        let b = PrivacyBudget::new(1.0, delta).unwrap();
        let params = optimize_params(rounds, &b, 1e-12).unwrap();
        let n = rounds as f64;
        let feasible = params.delta_tilde
            + params.theta * (1.0 - params.delta_tilde) * n;
        prop_assert!(feasible <= delta * (1.0 + 1e-9));
        let best = quantile_sum_objective(params.delta_tilde, rounds, delta);
        for f in fractions {
            let candidate = quantile_sum_objective(f * delta, rounds, delta);
            prop_assert!(best <= candidate + 1e-9,
                "split {f} beats optimizer: {candidate} < {best}");
        }
    }

    /// Survival curves start at one and never increase, whichever filter
    /// produced them.
    #[test]
    fn survival_curves_start_at_one_and_never_rise(
        sigma in 1.0..3.0f64,
        eps in 3.0..8.0f64,
        seed in any::<u64>(),
    ) {
        let config = SimConfig {
            sigma, epsilon: eps, delta: 1e-2, max_rounds: 8, trials: 200, seed,
            filters: FilterKind::ALL.to_vec(), output_path: None,
            delta_tilde: None, theta: None,
        };
        let curves = simulate_survival(&config).unwrap();
        prop_assert_eq!(curves.len(), 4);
        for curve in &curves {
            prop_assert_eq!(curve.survival(0), 1.0);
            let mut prev = 1.0;
            for t in 0..=8 {
                let s = curve.survival(t);
                prop_assert!((0.0..=prev).contains(&s), "{} rises at {t}", curve.filter_name);
                prev = s;
            }
        }
    }

    /// Emitting, parsing, and re-emitting a survival CSV is a fixed point.
    #[test]
    fn survival_csv_round_trips(
        sigma in 1.0..3.0f64,
        seed in any::<u64>(),
    ) {
        let config = SimConfig {
            sigma, epsilon: 6.0, delta: 1e-2, max_rounds: 5, trials: 64, seed,
            filters: vec![FilterKind::Realisation, FilterKind::Additive],
            output_path: None, delta_tilde: None, theta: None,
        };
        let curves = simulate_survival(&config).unwrap();
        let text = emit_csv(&curves);
        let parsed = parse_csv(&text).unwrap();
        prop_assert_eq!(emit_csv(&parsed), text);
    }
}
