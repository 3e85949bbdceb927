//! Trains a classifier and a purifier on half of the bundled MNIST split, then compares the
//! classifier with the purification pipeline, clean and under EoT-PGD.

use std::path::Path;

use carso::aggregation::Strategy;
use carso::attacks::AttackSpec;
use carso::data::{load_split, Split};
use carso::nets::{Classifier, ClassifierSpec, Purifier, PurifierSpec, PurifierWidths};
use carso::pipeline::{evaluate, Defense, EvalOptions, ModelStack};
use carso::training::{train_classifier_adversarial, train_purifier, TrainConfig};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let train = load_split(&dir, Split::Train).unwrap().head(2000);
    let test = load_split(&dir, Split::Test).unwrap().head(40);

    let mut ccfg = TrainConfig::desk_classifier();
    ccfg.epochs = 3;
    ccfg.lr.warmup = 1;
    ccfg.lr.plateau = 1;
    ccfg.lr.anneal = 1;
    let spec = ClassifierSpec::desk(train.image_shape(), [8, 16, 16, 32], 64, train.num_classes);
    let classifier = train_classifier_adversarial(&train, &ccfg, Classifier::init(spec.clone(), 1).unwrap(), None)
        .unwrap()
        .classifier;
    println!("classifier trained");

    let mut pcfg = TrainConfig::desk_purifier();
    pcfg.epochs = 16;
    pcfg.lr.warmup = 2;
    pcfg.lr.plateau = 6;
    pcfg.lr.anneal = 8;
    pcfg.beta.start = 2;
    pcfg.beta.end = 4;
    let pspec = PurifierSpec::for_classifier(&spec, PurifierWidths::default()).unwrap();
    let purifier = Purifier::init(pspec, train.stats().unwrap(), 2).unwrap();
    let run = train_purifier(&train, &classifier, purifier, &pcfg, None).unwrap();
    for e in &run.history {
        println!("purifier epoch {}: loss {:.2}", e.epoch, e.loss);
    }
    let stack = ModelStack::new(classifier, run.purifier).unwrap();

    let opts = EvalOptions {
        attack: Some(AttackSpec::eot_pgd(0.1, 0.02, 10, 4)),
        attack_samples: 2,
        seed: 3,
        ..EvalOptions::default()
    };
    let defenses = [
        ("classifier", Defense::Classifier(&stack.classifier)),
        (
            "pipeline",
            Defense::Pipeline {
                stack: &stack,
                n_samples: 8,
                strategy: Strategy::Carso,
            },
        ),
    ];
    for (name, d) in &defenses {
        let r = evaluate(&test, d, &opts).unwrap();
        println!(
            "{name}: clean {:.3}, robust {:.3}",
            r.clean_acc,
            r.robust_acc.unwrap()
        );
    }
}
