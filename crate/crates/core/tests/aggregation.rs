//! Properties of the three sample aggregations and the takeover probe.

#[path = "common/agg_props.rs"]
mod agg_props;

use carso::aggregation::{takeover_probe, LogitMatrix, ProbeMode, Strategy, PROBE_LIMIT};
use proptest::prelude::*;
use proptest::strategy::Strategy as Gen;

fn matrix(max_n: usize, max_c: usize, range: f64) -> impl Gen<Value = LogitMatrix> {
    (1..=max_n, 2..=max_c).prop_flat_map(move |(n, c)| {
        prop::collection::vec(-range..range, n * c).prop_map(move |v| LogitMatrix::new(n, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn every_strategy_normalises(l in matrix(8, 10, 60.0)) {
        agg_props::normalises(&l);
    }

    /// Strict positivity wherever the exact probabilities are representable:
    /// CARSO score gaps stay below ~700 for N <= 8 and |l| <= 4.
    #[test]
    fn probabilities_are_positive(l in matrix(8, 10, 4.0)) {
        agg_props::positive(&l);
    }

    #[test]
    fn single_sample_agrees_with_argmax(l in matrix(1, 10, 20.0)) {
        agg_props::single_sample_agrees_with_argmax(&l);
    }

    #[test]
    fn permutation_equivariance(l in matrix(6, 8, 10.0), key in any::<u64>()) {
        agg_props::permutation_equivariance(&l, key);
    }

    #[test]
    fn log_domain_matches_product_form(l in matrix(4, 10, 3.0)) {
        agg_props::log_domain_matches_product_form(&l);
    }

    #[test]
    fn deflation_is_bounded(l in matrix(8, 10, 10.0), pick in any::<(usize, usize)>()) {
        agg_props::deflation_is_bounded(&l, pick.0 % l.samples(), pick.1 % l.classes());
    }
}

#[test]
fn deflation_takes_over_logit_mean_but_not_carso() {
    for rows in agg_props::deflation_fixtures() {
        agg_props::deflation_takes_over_logit_mean_but_not_carso(&rows);
    }
}

#[test]
fn inflation_flip_threshold_matches_grid_oracle() {
    let rows = vec![vec![4.0, 0.0], vec![3.0, 1.0], vec![3.5, 0.5], vec![4.0, -1.0]];
    let l = LogitMatrix::from_rows(&rows).unwrap();
    let steps = 400;
    let r = takeover_probe(&l, 0, 1, ProbeMode::Inflate, &[Strategy::Carso], steps).unwrap();
    let s0: f64 = rows.iter().map(|r| r[0].exp()).sum();
    let rest: f64 = rows[1..].iter().map(|r| r[1].exp()).sum();
    let start = rows[0][1];
    let oracle = (1..=steps)
        .map(|k| start + (PROBE_LIMIT - start) * k as f64 / steps as f64)
        .find(|&v| v.min(30.0).exp() + rest > s0);
    assert_eq!(r.flipped(Strategy::Carso), oracle);
    // log(s0 - rest) ≈ 4.1: one member must push past every other member's evidence
    assert!(oracle.unwrap() > 4.0);
}
