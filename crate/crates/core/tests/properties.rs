//! Invariants that must hold for any input.

use glshrink_core::diagnostics::split_rhat;
use glshrink_core::distributions::RngStream;
use glshrink_core::io::{panel_to_csv, parse_panel};
use glshrink_core::metrics::{best_model_counts, discrepancy_ratio, score, FitScore, Measure};
use glshrink_core::model::init_state;
use glshrink_core::oracle::collapsed_conditional_mean;
use glshrink_core::summary::{decompose, kappa_weights, quantile};
use glshrink_core::{ModelTag, SourcePanel};
use proptest::prelude::*;
use rand::Rng;
use std::path::Path;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn chains() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 4usize..40).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), m))
}

fn tag() -> impl Strategy<Value = ModelTag> {
    prop::sample::select(ModelTag::ALL.to_vec())
}

/// A panel with estimates near 0.25 and standard errors in [0.003, 0.1].
fn panel() -> impl Strategy<Value = SourcePanel> {
    (2usize..8, 1usize..4).prop_flat_map(|(n_i, n_j)| {
        (
            prop::collection::vec(0.05f64..0.6, n_i * n_j),
            prop::collection::vec(0.003f64..0.1, n_i * n_j),
        )
            .prop_map(move |(y, se)| {
                let areas = (1..=n_i).map(|i| format!("{:05}", 1000 + i)).collect();
                let sources = (1..=n_j).map(|j| format!("S{j}")).collect();
                SourcePanel::from_standard_errors(areas, sources, y, se).unwrap()
            })
    })
}

/// Random positive variances in a state of `tag` on `panel`.
fn random_state(panel: &SourcePanel, tag: ModelTag, seed: u64) -> glshrink_core::ChainState {
    let mut rng = RngStream::new(seed, 5);
    let mut s = init_state(panel, tag, 0.02, &mut rng).unwrap();
    let mut pos = |lo: f64, hi: f64| (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp();
    for x in s.lambda_ij.iter_mut().chain(s.lambda_i.iter_mut()) {
        *x = pos(1e-3, 1e3);
    }
    s.tau1_sq = pos(1e-6, 1e-1);
    s.tau2_sq = pos(1e-6, 1e-1);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rhat_ignores_chain_order(c in chains(), rot in 0usize..6) {
        let mut p = c.clone();
        p.rotate_left(rot % c.len());
        p.reverse();
        prop_assert!(close(split_rhat(&c).unwrap(), split_rhat(&p).unwrap(), 1e-12));
    }

    #[test]
    fn rhat_is_location_and_scale_free(c in chains(), shift in -100.0f64..100.0, scale in prop::sample::select(vec![-3.0, -0.01, 0.5, 7.0, 1e4])) {
        let r = split_rhat(&c).unwrap();
        let moved: Vec<Vec<f64>> = c.iter().map(|ch| ch.iter().map(|x| x + shift).collect()).collect();
        let scaled: Vec<Vec<f64>> = c.iter().map(|ch| ch.iter().map(|x| x * scale).collect()).collect();
        prop_assert!(close(r, split_rhat(&moved).unwrap(), 1e-9));
        prop_assert!(close(r, split_rhat(&scaled).unwrap(), 1e-9));
    }

    #[test]
    fn relative_measures_are_scale_free(
        pairs in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..30),
        c in 0.01f64..100.0,
    ) {
        let (e, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let s = score(&e, &t).unwrap();
        let ce: Vec<f64> = e.iter().map(|x| c * x).collect();
        let ct: Vec<f64> = t.iter().map(|x| c * x).collect();
        let sc = score(&ce, &ct).unwrap();
        prop_assert!(close(sc.arb, s.arb, 1e-12) || s.arb < 1e-15);
        prop_assert!(close(sc.asrb, s.asrb, 1e-12) || s.asrb < 1e-15);
        prop_assert!(close(sc.aad, c * s.aad, 1e-12) || s.aad < 1e-15);
        prop_assert!(close(sc.asd, c * c * s.asd, 1e-12) || s.asd < 1e-15);
        for m in Measure::ALL {
            prop_assert!(s.get(m) >= 0.0);
        }
        prop_assert_eq!(s.aad == 0.0, e == t);
    }

    #[test]
    fn asrb_bounds_squared_arb_for_one_area(e in -1.0f64..1.0, t in prop::sample::select(vec![-0.4, 0.01, 0.25, 3.0])) {
        let s = score(&[e], &[t]).unwrap();
        prop_assert!(s.asrb >= s.arb * s.arb * (1.0 - 1e-12));
    }

    #[test]
    fn ratio_of_a_model_to_itself_is_one(xs in prop::collection::vec((1e-6f64..10.0, 1e-6f64..10.0, 1e-6f64..10.0, 1e-6f64..10.0), 1..20)) {
        let scores: Vec<FitScore> = xs.iter().map(|&(arb, asrb, aad, asd)| FitScore { arb, asrb, aad, asd }).collect();
        for m in Measure::ALL {
            let r = discrepancy_ratio("a", &scores, "a", &scores, m).unwrap();
            prop_assert!(r.ratios.iter().all(|x| *x == 1.0));
        }
    }

    #[test]
    fn every_specification_has_a_best_model(rs in prop::collection::vec(prop::collection::vec(0.1f64..3.0, 5), 2..5)) {
        let named: Vec<(String, Vec<f64>)> = rs.into_iter().enumerate().map(|(k, r)| (format!("m{k}"), r)).collect();
        let b = best_model_counts(&named).unwrap();
        let total: usize = b.counts.values().sum();
        prop_assert!(total >= 5);
        prop_assert_eq!(total == 5, b.tied.is_empty());
    }

    #[test]
    fn quantiles_are_monotone_and_bounded(xs in prop::collection::vec(-10.0f64..10.0, 1..50), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let (a, b) = (quantile(&xs, lo), quantile(&xs, hi));
        prop_assert!(a <= b);
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= a && b <= max);
    }

    #[test]
    fn weighted_grand_mean_is_a_convex_combination(p in panel(), tag in tag(), seed in 0u64..1000) {
        let p = if tag == ModelTag::OneSource { p.select_source(0).unwrap() } else { p };
        let s = random_state(&p, tag, seed);
        let d = decompose(&s, &p, tag);
        let min = d.ybar.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.ybar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min - 1e-15 <= d.ybar_w && d.ybar_w <= max + 1e-15);
        prop_assert!(d.phi.iter().all(|f| *f > 0.0 && *f <= 1.0));
        let cm = collapsed_conditional_mean(&s, &p, tag);
        for (a, b) in d.conditional_mean.iter().zip(&cm) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn source_weights_lie_in_the_unit_interval(p in panel(), seed in 0u64..1000) {
        for tag in [ModelTag::M1a, ModelTag::M1b, ModelTag::M12] {
            let s = random_state(&p, tag, seed);
            let k = kappa_weights(&s, &p, tag).unwrap();
            prop_assert!(k.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
    }

    #[test]
    fn panel_text_round_trips(p in panel()) {
        let back = parse_panel(&panel_to_csv(&p), Path::new("p.csv")).unwrap();
        prop_assert_eq!(back, p);
    }
}

#[test]
fn rhat_grows_with_offset_between_chains() {
    let mut rng = RngStream::new(12, 0);
    let base: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..500).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let mut last = 0.0;
    for offset in [0.0, 0.1, 1.0, 10.0] {
        let c: Vec<Vec<f64>> = base
            .iter()
            .enumerate()
            .map(|(k, ch)| ch.iter().map(|x| x + if k == 0 { offset } else { 0.0 }).collect())
            .collect();
        let r = split_rhat(&c).unwrap();
        assert!(r > last, "offset {offset}: R-hat {r} not above {last}");
        assert!(r >= 1.0 - 1e-3);
        last = r;
    }
}
