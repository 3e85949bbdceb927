//! Closed-form KL against quadrature, and the scenario-(a) schedule
//! breakpoints.

#![allow(dead_code)]

use carso::tensor::Tensor;
use carso::training::{kl_std_normal, TrainConfig};

/// `KL(N(mu, sigma^2) || N(0, 1))` by composite Simpson quadrature of
/// `q log(q / p)` over `mu ± 14 sigma`.
pub fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
    let sigma = (0.5 * logvar).exp();
    let (lo, hi) = (mu - 14.0 * sigma, mu + 14.0 * sigma);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |z: f64| {
        let log_q = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_p = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_q.exp() * (log_q - log_p)
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn kl_matches_quadrature(mu: &[f64], logvar: &[f64]) {
    let k = mu.len();
    let m = Tensor::<f64>::new(vec![1, k], mu.to_vec()).unwrap();
    let l = Tensor::<f64>::new(vec![1, k], logvar[..k].to_vec()).unwrap();
    let oracle: f64 = mu.iter().zip(logvar).map(|(&a, &b)| kl_quadrature(a, b)).sum();
    let got = kl_std_normal(&m, &l).unwrap();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

pub fn scenario_a_schedule_breakpoints() {
    let cfg = TrainConfig::paper_scenario_a();
    assert_eq!(cfg.epochs, 200);
    let beta = cfg.beta;
    assert_eq!((beta.start, beta.end), (25, 34));
    assert_eq!(beta.at(0.0), 0.0);
    assert_eq!(beta.at(24.0), 0.0);
    assert_eq!(beta.at(25.0), 0.0);
    assert!(beta.at(26.0) > 0.0);
    assert!((beta.at(29.5) - 0.5).abs() < 1e-15);
    assert_eq!(beta.at(34.0), 1.0);
    assert_eq!(beta.at(199.0), 1.0);

    let lr = cfg.lr;
    assert_eq!(lr.at(0.0), 5e-9);
    assert_eq!(lr.at(25.0), 0.064);
    assert_eq!(lr.at(50.0), 0.064);
    assert_eq!(lr.at(200.0), 4.346e-4);
    assert!((lr.at(12.5) - (5e-9 + 0.064) / 2.0).abs() < 1e-15);
    assert!((lr.at(125.0) - (0.064 + 4.346e-4) / 2.0).abs() < 1e-15);
    let per_epoch: Vec<f64> = (0..200).map(|e| lr.at(e as f64)).collect();
    assert!(per_epoch[..25].windows(2).all(|w| w[1] > w[0]));
    assert!(per_epoch[25..=50].iter().all(|&v| v == 0.064));
    assert!(per_epoch[50..].windows(2).all(|w| w[1] < w[0]));
}
