//! Randomized invariants across modules.

use proptest::prelude::*;
use widenet::chain::{j_vector, k_vector, sample_inputs, Backend};
use widenet::data::{DataSpec, LossSpec, Objective, Sample};
use widenet::finite::{init_finite, InitDists};
use widenet::harness::{fit_width_slope, histogram, ExperimentConfig, ExperimentKind};
use widenet::limit::{init_limit, Truncation};
use widenet::multilayer::{enumerate_sequences, is_valid_sequence, SequenceCoding, WalkCoding};
use widenet::numerics::{discrete_frechet, RngStream, RunStreams};

fn teacher_objective(teacher: Vec<f64>, scale: f64) -> Objective {
    let data = DataSpec::synthetic(teacher).resolve(RngStream::for_object(0, 1, 0, 0)).unwrap();
    Objective::new(data, LossSpec::Square, scale).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn limit_support_stays_within_the_sparsity_bound(
        teacher in prop::collection::vec(-2.0f64..2.0, 1..4),
        tau in 0.01f64..0.3,
        steps in 1usize..12,
    ) {
        let d = teacher.len();
        let obj = teacher_objective(teacher, 1.0);
        let mut st = init_limit(d, Truncation::default()).unwrap();
        for k in 1..=steps {
            st.gd_step(&obj, tau).unwrap();
            prop_assert!(st.support() <= d * (k + 1), "support {} at step {k}", st.support());
        }
    }

    #[test]
    fn fixed_truncation_beyond_the_support_changes_nothing(
        teacher in prop::collection::vec(-2.0f64..2.0, 1..3),
        tau in 0.01f64..0.3,
        extra in 0usize..10,
    ) {
        let d = teacher.len();
        let steps = 8;
        let obj = teacher_objective(teacher, 1.0);
        let r = d * (steps + 1) + 1;
        let mut a = init_limit(d, Truncation::Fixed(r)).unwrap();
        let mut b = init_limit(d, Truncation::Fixed(r + extra)).unwrap();
        let mut c = init_limit(d, Truncation::default()).unwrap();
        for _ in 0..steps {
            a.gd_step(&obj, tau).unwrap();
            b.gd_step(&obj, tau).unwrap();
            c.gd_step(&obj, tau).unwrap();
            prop_assert_eq!(a.raw_predictor(), b.raw_predictor());
            let (pa, pc) = (a.raw_predictor(), c.raw_predictor());
            for (x, y) in pa.iter().zip(&pc) {
                prop_assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn finite_runs_are_pure_functions_of_their_streams(m in 1usize..24, d in 1usize..4, seed in any::<u64>(), rep in 0u32..100) {
        let obj = teacher_objective(vec![0.5; d], 1.0);
        let streams = RunStreams::new(seed, 7, rep);
        let mut a = init_finite(m, d, streams, InitDists::default()).unwrap();
        let mut b = init_finite(m, d, streams, InitDists::default()).unwrap();
        for _ in 0..3 {
            a.gd_step(&obj, 0.1).unwrap();
            b.gd_step(&obj, 0.1).unwrap();
        }
        prop_assert_eq!(a.raw_predictor(), b.raw_predictor());
    }

    #[test]
    fn predictor_scales_linearly(m in 1usize..16, s in 0.01f64..20.0, seed in any::<u64>()) {
        let st = init_finite(m, 2, RunStreams::new(seed, 7, 0), InitDists::default()).unwrap();
        let raw = st.raw_predictor();
        for (p, r) in st.predictor(s).iter().zip(&raw) {
            prop_assert_eq!(*p, s * r);
        }
    }

    #[test]
    fn enumeration_matches_closed_form(m in 2usize..7, k in 0usize..4, seed in any::<u64>()) {
        let (z, u, v) = sample_inputs(m, 2, RunStreams::new(seed, 9, 0), InitDists::default());
        let je = j_vector(k, &z, &u, Backend::Enumeration).unwrap();
        let jc = j_vector(k, &z, &u, Backend::ClosedForm).unwrap();
        for (a, b) in je.data.iter().zip(&jc.data) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
        let ke = k_vector(k, &z, &v, Backend::Enumeration).unwrap();
        let kc = k_vector(k, &z, &v, Backend::ClosedForm).unwrap();
        for (a, b) in ke.iter().zip(&kc) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn walk_numbering_is_a_bijection(l_total in 1usize..5, ell in 0usize..5, max_len in 1usize..8) {
        prop_assume!(ell <= l_total);
        let coding = WalkCoding { l_total };
        let seqs = enumerate_sequences(l_total, ell, max_len).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for s in &seqs {
            prop_assert!(is_valid_sequence(l_total, s));
            let i = coding.index(s).unwrap();
            prop_assert!(seen.insert(i));
            prop_assert_eq!(coding.sequence(ell, i), Some(s.clone()));
        }
    }

    #[test]
    fn power_law_slopes_are_recovered(p in -2.5f64..0.5, c in 0.01f64..100.0) {
        let pts: Vec<_> = [16usize, 32, 64, 128].iter().map(|&m| (m, c * (m as f64).powf(p), 0.0)).collect();
        let fit = fit_width_slope(&pts).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-9);
    }

    #[test]
    fn histograms_keep_every_sample(x in prop::collection::vec(-1e3f64..1e3, 1..200), bins in 1usize..50) {
        let h = histogram(&x, bins);
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), x.len());
    }

    #[test]
    fn frechet_distance_is_symmetric_and_zero_on_the_diagonal(
        p in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..20),
        q in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..20),
    ) {
        prop_assert_eq!(discrete_frechet(&p, &p), 0.0);
        prop_assert_eq!(discrete_frechet(&p, &q), discrete_frechet(&q, &p));
    }

    #[test]
    fn samples_round_trip_through_json(x in prop::collection::vec(-1e6f64..1e6, 1..6), y in -1e6f64..1e6) {
        let s = Sample { x, y };
        let text = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(serde_json::from_str::<Sample>(&text).unwrap(), s);
    }

    #[test]
    fn configs_round_trip_through_json(seed in any::<u64>(), seeds in 1usize..100, first in 1usize..64, n in 1usize..5) {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::SweepWidth);
        cfg.master_seed = seed;
        cfg.seeds = seeds;
        cfg.widths = (0..n).map(|i| first << i).collect();
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(ExperimentConfig::from_json(ExperimentKind::SweepWidth, &text).unwrap(), cfg);
    }
}
