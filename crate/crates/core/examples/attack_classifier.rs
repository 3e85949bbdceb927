//! Trains a small CNN on part of the bundled MNIST split and measures its
//! accuracy under FGSM and PGD at several budgets.

use std::path::Path;

use carso::attacks::{self, AttackSpec};
use carso::data::{load_split, Split};
use carso::nets::{Classifier, ClassifierSpec};
use carso::tensor::Tensor;
use carso::training::{train_classifier_adversarial, TrainConfig};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let train = load_split(&dir, Split::Train).unwrap().head(1024);
    let test = load_split(&dir, Split::Test).unwrap().head(200);

    let mut cfg = TrainConfig::desk_classifier();
    cfg.adversarial_fraction = 0.0;
    cfg.epochs = 3;
    cfg.lr.warmup = 1;
    cfg.lr.plateau = 1;
    cfg.lr.anneal = 1;
    let spec = ClassifierSpec::desk(test.image_shape(), [8, 16, 16, 32], 64, test.num_classes);
    let classifier = train_classifier_adversarial(&train, &cfg, Classifier::init(spec, 1).unwrap(), None)
        .unwrap()
        .classifier;

    let idx: Vec<usize> = (0..test.len()).collect();
    let (x, y) = test.batch(&idx);
    let acc = |x: &Tensor<f32>| {
        let p = classifier.predict(x).unwrap();
        p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    };
    println!("clean accuracy {:.3}", acc(&x));
    for eps in [0.05, 0.1, 0.2] {
        let fgsm = attacks::run(&classifier, &x, &y, &AttackSpec::fgsm(eps), 7).unwrap();
        let pgd = attacks::run(&classifier, &x, &y, &AttackSpec::pgd(eps, eps / 4.0, 20), 7).unwrap();
        println!(
            "eps {eps:.2}: FGSM accuracy {:.3}, PGD-20 accuracy {:.3}",
            acc(&fgsm.x_adv),
            acc(&pgd.x_adv)
        );
    }
}
