//! Writes a classifier checkpoint, reads it back, and shows that a corrupted
//! copy is rejected.

use std::collections::BTreeMap;

use carso::nets::{Classifier, ClassifierSpec};
use carso::training::{Checkpoint, ModelKind};

fn main() {
    let spec = ClassifierSpec::desk([1, 28, 28], [8, 16, 16, 32], 64, 10);
    let c = Classifier::<f32>::init(spec.clone(), 4).unwrap();
    let ckpt = Checkpoint {
        kind: ModelKind::Classifier,
        classifier: spec,
        purifier: None,
        stats: None,
        epoch: 0,
        seed: 4,
        params: c.params.clone(),
        optimizer: None,
        metadata: BTreeMap::from([("note".to_string(), "freshly initialised".to_string())]),
    };

    let dir = std::env::temp_dir().join("carso-checkpoint-example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("classifier.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    println!(
        "{} bytes, fingerprint {} -> {}",
        std::fs::metadata(&path).unwrap().len(),
        c.params.fingerprint(),
        back.params.fingerprint()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    match Checkpoint::from_bytes(&bytes) {
        Ok(_) => println!("truncated copy unexpectedly loaded"),
        Err(e) => println!("truncated copy rejected: {e}"),
    }
}
