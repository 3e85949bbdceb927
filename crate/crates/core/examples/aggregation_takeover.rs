//! Aggregates a fixed ensemble of logits with each strategy, then sweeps one
//! member's logit down and reports where each strategy changes its decision.

use carso::aggregation::{aggregate, takeover_probe, LogitMatrix, ProbeMode, Strategy};

fn main() {
    // Four samples that agree on class 0.
    let l = LogitMatrix::from_rows(&[
        vec![3.0, 1.0, -0.5],
        vec![2.5, 0.0, 0.2],
        vec![2.0, 0.5, -1.0],
        vec![3.0, 0.0, 0.0],
    ])
    .unwrap();

    for s in Strategy::ALL {
        let p = aggregate(s, &l).unwrap();
        let probs: Vec<String> = p.probs.iter().map(|v| format!("{v:.4}")).collect();
        println!("{:>10}: class {} probs [{}]", s.name(), p.class, probs.join(", "));
    }

    let r = takeover_probe(&l, 0, 0, ProbeMode::Deflate, &Strategy::ALL, 81).unwrap();
    println!("\ndeflating sample 0, class 0:");
    for s in Strategy::ALL {
        match r.flipped(s) {
            Some(v) => println!("{:>10}: decision flips at logit {v:.2}", s.name()),
            None => println!("{:>10}: decision never flips", s.name()),
        }
    }
}
