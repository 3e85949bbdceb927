//! Randomised invariants of the ℓ∞ attacks: every adversarial example stays in
//! the ε-ball and the pixel range, and one unrandomised PGD step is FGSM.

#[path = "common/attack_cases.rs"]
mod attack_cases;

use attack_cases::{case, check_bounds, image, Linear};
use carso::aggregation::Strategy;
use carso::attacks::{self, AttackSpec};
use carso::nets::{Classifier, ClassifierSpec, DatasetStats, Purifier, PurifierSpec, PurifierWidths};
use carso::pipeline::ModelStack;
use carso::rng::Rng;
use carso::tensor::Tensor;
use proptest::prelude::*;

const CASES: u32 = 1000;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn projection_stays_in_ball(v in prop::collection::vec(-5.0f64..5.0, 1..64), eps in 0.0f64..2.0) {
        prop_assert!(attack_cases::projection(&v, eps).is_ok(), "{:?}", attack_cases::projection(&v, eps));
    }

    #[test]
    fn fgsm_stays_in_ball(key in any::<u64>()) {
        let r = attack_cases::fgsm(key);
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn pgd_stays_in_ball(key in any::<u64>(), random_init in any::<bool>()) {
        let r = attack_cases::pgd(key, random_init);
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn eot_pgd_stays_in_ball(key in any::<u64>(), draws in 1usize..5) {
        let r = attack_cases::eot_pgd(key, draws);
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn single_step_pgd_is_fgsm(key in any::<u64>()) {
        let r = attack_cases::single_step_pgd_is_fgsm(key);
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

/// The same invariants on real networks: a small CNN for FGSM and PGD, and
/// the purification pipeline for EoT-PGD.
#[test]
fn network_targets_stay_in_ball() {
    let spec = ClassifierSpec::desk([1, 28, 28], [2, 3, 2, 3], 8, 10);
    let classifier = Classifier::<f32>::init(spec.clone(), 3).unwrap();
    let widths = PurifierWidths {
        fcrepr: 4,
        fjoint: 3,
        input_channels: [2, 2],
        decoder_channels: [3, 2, 2],
    };
    let purifier = Purifier::<f32>::init(
        PurifierSpec::for_classifier(&spec, widths).unwrap(),
        DatasetStats::identity(1),
        4,
    )
    .unwrap();
    let stack = ModelStack::new(classifier.clone(), purifier).unwrap();
    let target = stack.target(2, Strategy::Carso);
    for key in 0..24u64 {
        let mut rng = Rng::new(key);
        let x = image(&mut rng, &[2, 1, 28, 28]);
        let labels = vec![(key % 10) as usize, ((key + 3) % 10) as usize];
        let eps = rng.uniform(0.01, 0.4);
        let fgsm = attacks::fgsm(&classifier, &x, &labels, eps, key).unwrap();
        let pgd = attacks::pgd(&classifier, &x, &labels, &AttackSpec::pgd(eps, eps / 4.0, 5), key).unwrap();
        let eot = attacks::eot_pgd(&target, &x, &labels, &AttackSpec::eot_pgd(eps, eps / 2.0, 2, 2), key).unwrap();
        for out in [fgsm, pgd, eot] {
            check_bounds(&x, &out.x_adv, eps).unwrap();
        }
        let one = AttackSpec { random_init: false, ..AttackSpec::pgd(eps, eps / 3.0, 1) };
        assert_eq!(
            attacks::pgd(&classifier, &x, &labels, &one, key).unwrap().x_adv,
            attacks::fgsm(&classifier, &x, &labels, eps / 3.0, key).unwrap().x_adv
        );
    }
}

#[test]
fn zero_budget_returns_the_input() {
    let c = case(11);
    for spec in [AttackSpec::fgsm(0.0), AttackSpec::pgd(0.0, 0.0, 5), AttackSpec::eot_pgd(0.0, 0.0, 5, 3)] {
        let out = attacks::run(&c.target, &c.x, &c.labels, &spec, 1).unwrap();
        assert_eq!(out.x_adv, c.x);
    }
}

#[test]
fn attacks_raise_the_loss_of_a_linear_model() {
    let target = Linear::new(5, 16, 4, 0.0);
    let mut rng = Rng::new(6);
    let x = image(&mut rng, &[32, 16]);
    let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
    let ce = |x: &Tensor<f32>| -> f64 {
        (0..32)
            .map(|r| {
                let row: Vec<f64> = x.row(r).iter().map(|&v| f64::from(v)).collect();
                let logits = target.logits(&target.w, &row);
                -carso::aggregation::softmax(&logits)[labels[r]].ln()
            })
            .sum()
    };
    let clean = ce(&x);
    let fgsm = attacks::fgsm(&target, &x, &labels, 0.1, 0).unwrap().x_adv;
    let pgd = attacks::pgd(&target, &x, &labels, &AttackSpec::pgd(0.1, 0.02, 20), 0).unwrap().x_adv;
    assert!(ce(&fgsm) > clean);
    assert!(ce(&pgd) > clean);
}
