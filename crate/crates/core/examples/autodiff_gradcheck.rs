//! Builds a small convolutional graph on the tape, backpropagates, and
//! compares the input gradient with central finite differences.

use carso::autodiff::{finite_diff_grad, relative_error, Graph};
use carso::rng::Rng;
use carso::tensor::Tensor;

fn main() {
    let mut rng = Rng::new(1);
    let x0 = Tensor::<f64>::from_fn(&[2, 1, 6, 6], |_| rng.uniform(0.0, 1.0));
    let w = Tensor::<f64>::from_fn(&[3, 1, 3, 3], |_| rng.normal() * 0.5);
    let head = Tensor::<f64>::from_fn(&[4, 108], |_| rng.normal() * 0.1);
    let labels = [1, 2];

    let objective = |g: &mut Graph<f64>, x| {
        let wv = g.constant(w.clone());
        let h = g.conv2d(x, wv, None, 1, 1).unwrap();
        let h = g.leaky_relu(h, 0.2);
        let h = g.flatten(h).unwrap();
        let hv = g.constant(head.clone());
        let s = g.linear(h, hv, None).unwrap();
        g.cross_entropy(s, &labels).unwrap()
    };

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let loss = objective(&mut g, x);
    g.backward(loss).unwrap();
    let analytic = g.grad_or_zeros(x);

    let numeric = finite_diff_grad(
        |t| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let l = objective(&mut g, x);
            g.value(l).data()[0]
        },
        &x0,
        1e-6,
    );
    let err = relative_error(analytic.data(), numeric.data(), 1e-12);
    println!("loss {:.6}", g.value(loss).data()[0]);
    println!("relative error between tape and finite differences: {err:.2e}");
}
