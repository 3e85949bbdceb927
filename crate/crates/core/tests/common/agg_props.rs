//! Aggregation properties, each checked on one logit matrix; they panic on
//! violation.

#![allow(dead_code)]

use carso::aggregation::{
    aggregate, aggregate_carso, carso_scores, softmax, takeover_probe, LogitMatrix, ProbeMode, Strategy, PROBE_LIMIT,
};
use carso::rng::Rng;

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `P_i = prod_a exp(exp(l_i^a)) / Z`, evaluated literally.
pub fn product_form(l: &LogitMatrix) -> Vec<f64> {
    let raw: Vec<f64> = (0..l.classes())
        .map(|i| (0..l.samples()).map(|a| l.get(a, i).exp().exp()).product())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

pub fn random_matrix(rng: &mut Rng, max_n: usize, max_c: usize, range: f64) -> LogitMatrix {
    let n = 1 + (rng.next_u64() % max_n as u64) as usize;
    let c = 2 + (rng.next_u64() % (max_c as u64 - 1)) as usize;
    LogitMatrix::new(n, c, (0..n * c).map(|_| rng.uniform(-range, range)).collect()).unwrap()
}

pub fn normalises(l: &LogitMatrix) {
    for s in Strategy::ALL {
        let p = aggregate(s, l).unwrap();
        assert!(p.probs.iter().all(|&v| v >= 0.0 && v.is_finite()), "{s:?}: {:?}", p.probs);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{s:?}");
        assert_eq!(p.class, argmax(&p.probs), "{s:?}");
    }
}

pub fn positive(l: &LogitMatrix) {
    for s in Strategy::ALL {
        let p = aggregate(s, l).unwrap();
        assert!(p.probs.iter().all(|&v| v > 0.0), "{s:?}: {:?}", p.probs);
    }
}

pub fn single_sample_agrees_with_argmax(l: &LogitMatrix) {
    let expected = argmax(l.row(0));
    for s in Strategy::ALL {
        assert_eq!(aggregate(s, l).unwrap().class, expected, "{s:?}");
    }
}

pub fn permutation_equivariance(l: &LogitMatrix, key: u64) {
    let (n, c) = (l.samples(), l.classes());
    let mut rng = Rng::new(key);
    let cls = rng.permutation(c);
    let smp = rng.permutation(n);
    let mut by_class = l.clone();
    let mut by_sample = l.clone();
    for (a, &sa) in smp.iter().enumerate() {
        for (i, &ci) in cls.iter().enumerate() {
            by_class.set(a, i, l.get(a, ci));
            by_sample.set(a, i, l.get(sa, i));
        }
    }
    for s in Strategy::ALL {
        let p = aggregate(s, l).unwrap().probs;
        let pc = aggregate(s, &by_class).unwrap().probs;
        let ps = aggregate(s, &by_sample).unwrap().probs;
        for i in 0..c {
            assert!((pc[i] - p[cls[i]]).abs() < 1e-12, "{s:?} class permutation");
            assert!((ps[i] - p[i]).abs() < 1e-12, "{s:?} sample permutation");
        }
    }
}

pub fn log_domain_matches_product_form(l: &LogitMatrix) {
    let p = aggregate_carso(l).unwrap().probs;
    for (a, b) in p.iter().zip(&product_form(l)) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

/// Setting one logit to the probe floor is the same, up to 1e-6 in total
/// variation, as dropping that member's term for the class.
pub fn deflation_is_bounded(l: &LogitMatrix, a: usize, i: usize) {
    let mut deflated = l.clone();
    deflated.set(a, i, -PROBE_LIMIT);
    let p = aggregate_carso(&deflated).unwrap().probs;
    let mut s = carso_scores(l);
    s[i] -= l.get(a, i).exp();
    let d = tv(&p, &softmax(&s));
    assert!(d < 1e-6, "total variation {d}");
}

/// Agreeing members, one of which drives its logit for the shared class down.
pub fn deflation_fixtures() -> Vec<Vec<Vec<f64>>> {
    vec![
        vec![vec![2.0, 0.0]; 4],
        vec![vec![3.0, 1.0], vec![2.5, 0.0], vec![2.0, 0.5], vec![3.0, 0.0]],
        vec![vec![1.5, -1.0]; 8],
    ]
}

pub fn deflation_takes_over_logit_mean_but_not_carso(rows: &[Vec<f64>]) {
    let l = LogitMatrix::from_rows(rows).unwrap();
    let r = takeover_probe(&l, 0, 0, ProbeMode::Deflate, &Strategy::ALL, 168).unwrap();
    assert_eq!(r.baseline.iter().map(|p| p.class).collect::<Vec<_>>(), vec![0, 0, 0]);
    assert!(r.flipped(Strategy::LogitMean).is_some(), "{rows:?}");
    assert!(r.flipped(Strategy::Carso).is_none(), "{rows:?}");
    assert_eq!(r.points.last().unwrap().logit, -PROBE_LIMIT);
}
