use std::sync::OnceLock;

use prevalence_core::conditioning::{ConditioningSet, Constraint};
use prevalence_core::config::PipelineConfig;
use prevalence_core::grid::Dimension;
use prevalence_core::model::{inv_logit, logistic, Coefficient};
use prevalence_core::pipeline::{synthetic_run, SyntheticRun};
use prevalence_core::query::{aggregate_prevalence, credible_band};
use prevalence_core::store::{dequantize, quantize, QUANT_MAX};
use prevalence_core::weights::marginalize_weights;
use proptest::prelude::*;

fn run() -> &'static SyntheticRun {
    static RUN: OnceLock<SyntheticRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut config = PipelineConfig::desk();
        config.generation.ensemble_size = 200;
        config.generation.particles = 50;
        config.generation.weight_replicates = 25;
        config.generation.survey_size = 5000;
        synthetic_run(&config, 11, None).unwrap()
    })
}

fn constraint(card: usize) -> impl Strategy<Value = Constraint> {
    prop_oneof![
        Just(Constraint::Free),
        (0..card).prop_map(Constraint::Fixed),
        proptest::collection::btree_set(0..card, 1..=card).prop_map(Constraint::Set),
    ]
}

/// Conditioning sets over the desk grid (4 locations, 3 cohorts, 5 ages, 3 binaries).
fn conditioning() -> impl Strategy<Value = ConditioningSet> {
    (constraint(4), constraint(3), constraint(5), constraint(2), constraint(2), constraint(2)).prop_map(
        |(l, c, a, b0, b1, b2)| {
            ConditioningSet::free()
                .with(Dimension::Location, l)
                .with(Dimension::Cohort, c)
                .with(Dimension::Age, a)
                .with(Dimension::Binary(0), b0)
                .with(Dimension::Binary(1), b1)
                .with(Dimension::Binary(2), b2)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn logistic_is_symmetric(x in -700.0f64..700.0) {
        let s = inv_logit(x).unwrap() + inv_logit(-x).unwrap();
        prop_assert!((s - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn logistic_is_monotone(x in -40.0f64..40.0, dx in 1e-6f64..5.0) {
        prop_assert!(logistic(x) <= logistic(x + dx));
    }

    #[test]
    fn coefficients_are_affine_in_cohort(
        base in -64i32..64, s0 in -8i32..8, s1 in -8i32..8, f0 in -16i32..16, f1 in -16i32..16, c in 0usize..6,
    ) {
        // Dyadic inputs keep every product exact.
        let coef = Coefficient {
            intercept: base as f64 / 4.0,
            scale0: s0 as f64 / 8.0,
            scale1: s1 as f64 / 8.0,
            field0: vec![f0 as f64 / 16.0],
            field1: vec![f1 as f64 / 16.0],
        };
        let at = |c: usize| coef.value(0, c as f64);
        prop_assert_eq!(at(c) - at(0), c as f64 * (at(1) - at(0)));
    }

    #[test]
    fn quantization_error_is_bounded(p in 0.0f64..=1.0) {
        prop_assert!((dequantize(quantize(p)) - p).abs() <= 1.0 / (2.0 * QUANT_MAX));
    }

    #[test]
    fn aggregates_are_convex_combinations(cond in conditioning(), disease in 0usize..4, resolved: bool) {
        let store = &run().store;
        let Ok(prev) = aggregate_prevalence(store, disease, &cond, resolved) else {
            return Ok(());
        };
        let cells = cond.cells(store.grid());
        for (b, v) in prev.iter().enumerate() {
            let probs = cells.iter().map(|&c| store.probability(c, disease, b));
            let lo = probs.clone().fold(f64::INFINITY, f64::min);
            let hi = probs.fold(f64::NEG_INFINITY, f64::max);
            // A weighted mean can land one rounding step outside.
            prop_assert!(*v >= lo - 4.0 * f64::EPSILON && *v <= hi + 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn bands_nest_by_level(
        values in proptest::collection::vec(0.0f64..1.0, 1..400), a in 0.05f64..0.95, gap in 0.0f64..0.04,
    ) {
        let b = (a + gap).min(0.99);
        let (lo_a, hi_a) = credible_band(&values, a).unwrap();
        let (lo_b, hi_b) = credible_band(&values, b).unwrap();
        prop_assert!(lo_b <= lo_a && hi_a <= hi_b && lo_a <= hi_a);
    }

    #[test]
    fn marginalization_chains(s1 in conditioning(), s2 in conditioning(), replicate in proptest::option::of(0usize..25)) {
        let run = run();
        let joint = run.weights.joint(run.store.grid()).unwrap();
        let (Ok(first), Ok(direct)) = (marginalize_weights(&joint, &s1, replicate), marginalize_weights(&joint, &s1.and(&s2), replicate)) else {
            return Ok(());
        };
        let grid = run.store.grid();
        let kept: Vec<(usize, f64)> = first.into_iter().filter(|(c, _)| s2.allows(grid, &grid.profile(*c))).collect();
        let total: f64 = kept.iter().map(|(_, w)| w).sum();
        prop_assert_eq!(kept.len(), direct.len());
        for ((c1, w1), (c2, w2)) in kept.iter().zip(&direct) {
            prop_assert_eq!(c1, c2);
            prop_assert!((w1 / total - w2).abs() <= 1e-12);
        }
        prop_assert!((direct.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
