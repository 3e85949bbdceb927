//! Reverse-mode gradients against central finite differences, per op and for
//! the whole purification pipeline. f64 gradients must agree to 1e-5
//! relative error, f32 gradients (checked against the f64 oracle) to 1e-2.

#![allow(dead_code)]

use carso::aggregation::Strategy;
use carso::attacks::AttackTarget;
use carso::autodiff::{finite_diff_grad, relative_error, BatchNormMode, Graph, Var};
use carso::nets::{Classifier, ClassifierSpec, DatasetStats, ParamStore, Purifier, PurifierSpec, PurifierWidths};
use carso::pipeline::ModelStack;
use carso::rng::Rng;
use carso::tensor::{Scalar, Tensor};

pub const SEEDS: u64 = 100;
const F64_TOL: f64 = 1e-5;
const F32_TOL: f64 = 1e-2;
const H: f64 = 1e-6;
const DIRECTIONS: usize = 16;
/// Smaller step for the composite: thousands of LeakyReLU units make a kink
/// inside a wider probe interval likely.
const COMPOSITE_H: f64 = 1e-8;

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

/// Fixed, index-dependent weights so the scalar loss touches every output.
fn projection<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::of(((i * 7919) % 13) as f64 / 6.0 - 0.9))
}

fn loss<T: Scalar>(g: &mut Graph<T>, out: Var) -> Var {
    let w = g.constant(projection(g.value(out).shape()));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn analytic<T: Scalar>(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<T>, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.cast())).collect();
    let out = build(&mut g, &xs);
    let l = loss(&mut g, out);
    g.backward(l).unwrap();
    xs.iter().map(|&x| g.grad_or_zeros(x).to_f64_vec()).collect()
}

fn check(
    label: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    b64: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    b32: &dyn Fn(&mut Graph<f32>, &[Var]) -> Var,
) {
    let g64 = analytic(&inputs, b64);
    let g32 = analytic(&inputs, b32);
    for i in 0..inputs.len() {
        let fd = finite_diff_grad(
            |probe| {
                let mut g = Graph::<f64>::new();
                let xs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = b64(&mut g, &xs);
                let l = loss(&mut g, out);
                g.value(l).data()[0]
            },
            &inputs[i],
            H,
        );
        let e64 = relative_error(&g64[i], fd.data(), 1e-8);
        let e32 = relative_error(&g32[i], fd.data(), 1e-4);
        assert!(e64 < F64_TOL, "{label} seed {seed} input {i}: f64 relative error {e64:e}");
        assert!(e32 < F32_TOL, "{label} seed {seed} input {i}: f32 relative error {e32:e}");
    }
}

/// Runs `$body` as a graph builder at both precisions. Inside the body `S` is
/// the scalar type.
macro_rules! op_check {
    ($label:expr, $seed:expr, $inputs:expr, |$g:ident, $xs:ident| $body:expr) => {{
        fn b64($g: &mut Graph<f64>, $xs: &[Var]) -> Var {
            #[allow(dead_code)]
            type S = f64;
            $body
        }
        fn b32($g: &mut Graph<f32>, $xs: &[Var]) -> Var {
            #[allow(dead_code)]
            type S = f32;
            $body
        }
        check($label, $seed, $inputs, &b64, &b32);
    }};
}

/// Like `op_check!` but the builder captures per-seed values.
macro_rules! op_check_with {
    ($label:expr, $seed:expr, $inputs:expr, |$g:ident, $xs:ident| $body:expr) => {{
        check(
            $label,
            $seed,
            $inputs,
            &|$g: &mut Graph<f64>, $xs: &[Var]| -> Var { $body },
            &|$g: &mut Graph<f32>, $xs: &[Var]| -> Var { $body },
        );
    }};
}

fn shape4(rng: &mut Rng) -> Vec<usize> {
    vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)]
}

pub fn elementwise_binary() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let s = shape4(&mut rng);
        let a = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &s, -2.0, 2.0);
        op_check!("add", seed, vec![a.clone(), b.clone()], |g, x| g.add(x[0], x[1]).unwrap());
        op_check!("sub", seed, vec![a.clone(), b.clone()], |g, x| g.sub(x[0], x[1]).unwrap());
        op_check!("mul", seed, vec![a, b], |g, x| g.mul(x[0], x[1]).unwrap());
    }
}

pub fn add_bias() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let s = shape4(&mut rng);
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[s[1]], -1.0, 1.0);
        op_check!("add_bias", seed, vec![x, b], |g, x| g.add_bias(x[0], x[1]).unwrap());
    }
}

pub fn elementwise_unary() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let s = shape4(&mut rng);
        let x = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &s, 0.3, 3.0);
        op_check!("scale", seed, vec![x.clone()], |g, x| g.scale(x[0], S::of(-1.7)));
        op_check!("add_scalar", seed, vec![x.clone()], |g, x| {
            let y = g.add_scalar(x[0], S::of(0.3));
            g.mul(y, y).unwrap()
        });
        op_check!("leaky_relu", seed, vec![x.clone()], |g, x| g.leaky_relu(x[0], S::of(0.2)));
        op_check!("sigmoid", seed, vec![x.clone()], |g, x| g.sigmoid(x[0]));
        op_check!("exp", seed, vec![x.clone()], |g, x| g.exp(x[0]));
        op_check!("log", seed, vec![pos], |g, x| g.log(x[0]));
        op_check!("clamp", seed, vec![x], |g, x| g.clamp(x[0], S::of(-0.5), S::of(0.7)));
    }
}

pub fn matmul_and_linear() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let (m, k, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        op_check!("matmul", seed, vec![a.clone(), b], |g, x| g.matmul(x[0], x[1]).unwrap());
        op_check!("linear", seed, vec![a.clone(), w.clone(), bias], |g, x| g
            .linear(x[0], x[1], Some(x[2]))
            .unwrap());
        op_check!("linear_nobias", seed, vec![a, w], |g, x| g.linear(x[0], x[1], None).unwrap());
    }
}

pub fn convolutions() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let (n, ci, co) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let k = dim(&mut rng, 1, 3);
        let stride = dim(&mut rng, 1, 2);
        let pad = dim(&mut rng, 0, k - 1);
        let (h, w) = (dim(&mut rng, k, 6), dim(&mut rng, k, 6));
        let x = rand_tensor(&mut rng, &[n, ci, h, w], -1.0, 1.0);
        let wc = rand_tensor(&mut rng, &[co, ci, k, k], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[ci, co, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[co], -1.0, 1.0);
        op_check_with!("conv2d", seed, vec![x.clone(), wc.clone(), b.clone()], |g, v| g
            .conv2d(v[0], v[1], Some(v[2]), stride, pad)
            .unwrap());
        op_check_with!("conv2d_nobias", seed, vec![x.clone(), wc], |g, v| g
            .conv2d(v[0], v[1], None, stride, pad)
            .unwrap());
        let op = dim(&mut rng, 0, stride - 1);
        op_check_with!("conv_transpose2d", seed, vec![x, wt, b], |g, v| g
            .conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad, op)
            .unwrap());
    }
}

pub fn batch_norm_modes() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let c = dim(&mut rng, 1, 3);
        let shape = if seed % 2 == 0 {
            vec![dim(&mut rng, 3, 5), c]
        } else {
            vec![dim(&mut rng, 2, 3), c, dim(&mut rng, 2, 3), dim(&mut rng, 1, 3)]
        };
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[c], -0.5, 0.5);
        op_check!("batch_norm_train", seed, vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, S::of(1e-5)).unwrap().0
        });
        let mean: Vec<f64> = (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
        op_check_with!("batch_norm_eval", seed, vec![x, gamma, beta], |g, v| {
            let m: Vec<_> = mean.iter().map(|&a| Scalar::of(a)).collect();
            let s: Vec<_> = var.iter().map(|&a| Scalar::of(a)).collect();
            g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &m, var: &s }, Scalar::of(1e-5))
                .unwrap()
                .0
        });
    }
}

pub fn softmax_family_and_losses() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let (n, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 2, 5));
        let x = rand_tensor(&mut rng, &[n, c], -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| dim(&mut rng, 0, c - 1)).collect();
        let target = rand_tensor(&mut rng, &[n, c], 0.0, 1.0);
        op_check!("softmax", seed, vec![x.clone()], |g, v| g.softmax(v[0]).unwrap());
        op_check!("log_softmax", seed, vec![x.clone()], |g, v| g.log_softmax(v[0]).unwrap());
        op_check_with!("cross_entropy", seed, vec![x.clone()], |g, v| g
            .cross_entropy(v[0], &labels)
            .unwrap());
        op_check_with!("bce_with_logits_sum", seed, vec![x], |g, v| g
            .bce_with_logits_sum(v[0], &target.cast())
            .unwrap());
    }
}

pub fn reductions_and_reshapes() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let s = shape4(&mut rng);
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let extra = dim(&mut rng, 1, 4);
        let other = rand_tensor(&mut rng, &[s[0], extra], -1.0, 1.0);
        let group = dim(&mut rng, 1, 3);
        let rows = rand_tensor(&mut rng, &[s[0] * group, s[1]], -1.0, 1.0);
        op_check!("sum", seed, vec![x.clone()], |g, v| g.sum(v[0]));
        op_check!("mean", seed, vec![x.clone()], |g, v| g.mean(v[0]));
        op_check!("flatten", seed, vec![x.clone()], |g, v| g.flatten(v[0]).unwrap());
        op_check_with!("reshape", seed, vec![x.clone()], |g, v| {
            let n: usize = s.iter().product();
            g.reshape(v[0], &[n]).unwrap()
        });
        op_check!("concat", seed, vec![x.clone(), other], |g, v| {
            let f = g.flatten(v[0]).unwrap();
            g.concat(&[f, v[1]]).unwrap()
        });
        op_check_with!("repeat_rows", seed, vec![x], |g, v| g.repeat_rows(v[0], group).unwrap());
        op_check_with!("group_sum", seed, vec![rows], |g, v| g.group_sum(v[0], group).unwrap());
    }
}

/// Default init contracts activations layer by layer; after two networks the
/// input gradient is so small that finite differences drown in roundoff.
/// Scaling conv and linear weights restores roughly unit gain.
const FIXTURE_GAIN: f64 = 3.0;

fn amplify(params: &mut ParamStore<f64>) {
    let names: Vec<String> = params
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| k.ends_with(".weight") && !k.contains("bn"))
        .collect();
    for n in names {
        params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v *= FIXTURE_GAIN);
    }
}

fn tiny_stack(seed: u64) -> ModelStack<f64> {
    let spec = ClassifierSpec::desk([1, 28, 28], [2, 3, 2, 3], 5, 3);
    let mut classifier = Classifier::<f64>::init(spec.clone(), seed).unwrap();
    let widths = PurifierWidths {
        fcrepr: 4,
        fjoint: 3,
        input_channels: [2, 2],
        decoder_channels: [3, 2, 2],
    };
    let pspec = PurifierSpec::for_classifier(&spec, widths).unwrap();
    let mut purifier = Purifier::<f64>::init(pspec, DatasetStats::identity(1), seed ^ 0xABCD).unwrap();
    amplify(&mut classifier.params);
    amplify(&mut purifier.params);
    ModelStack::new(classifier, purifier).unwrap()
}

/// The aggregated scores of the full pipeline under fixed latent draws,
/// differentiated end to end through classifier, purifier and re-classifier.
pub fn composite_pipeline() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let stack = tiny_stack(seed);
        let batch = 2;
        let x = rand_tensor(&mut rng, &[batch, 1, 28, 28], 0.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| dim(&mut rng, 0, 2)).collect();
        let draws = [seed * 3 + 1, seed * 3 + 2];
        let strategy = Strategy::ALL[seed as usize % 3];
        let target = stack.target(3, strategy);
        // A projection of the aggregated scores rather than the cross-entropy,
        // which saturates on confident predictions and leaves derivatives
        // below the finite-difference noise floor.
        let objective = |g: &mut Graph<f64>, x: Var| {
            let s = target.scores_graph(g, x, &draws).unwrap();
            loss(g, s)
        };
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let l = objective(&mut g, xv);
        g.backward(l).unwrap();
        let grad = g.grad_or_zeros(xv);
        // Directional derivatives along random directions; a full coordinate
        // sweep over 2x784 inputs would dominate the suite's runtime. A
        // direction whose one-sided slopes disagree straddles a LeakyReLU kink
        // and is not a valid probe of the derivative.
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut kinks = 0;
        for _ in 0..DIRECTIONS {
            let v = rand_tensor(&mut rng, x.shape(), -1.0, 1.0);
            let at = |t: f64| {
                let mut g = Graph::new();
                let xv = g.constant(x.zip_map(&v, |a, b| a + t * b).unwrap());
                let l = objective(&mut g, xv);
                g.value(l).data()[0]
            };
            let (up, mid, down) = (at(COMPOSITE_H), at(0.0), at(-COMPOSITE_H));
            let (fwd, bwd) = ((up - mid) / COMPOSITE_H, (mid - down) / COMPOSITE_H);
            if (fwd - bwd).abs() > 1e-5 * (fwd.abs() + bwd.abs()) + 1e-7 {
                kinks += 1;
                continue;
            }
            analytic.push(grad.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>());
            numeric.push((up - down) / (2.0 * COMPOSITE_H));
        }
        assert!(kinks <= DIRECTIONS / 4, "seed {seed}: {kinks} of {DIRECTIONS} probes hit a kink");
        let err = relative_error(&analytic, &numeric, 1e-10);
        assert!(err < F64_TOL, "seed {seed} ({}): relative error {err:e}", strategy.name());
        assert!(grad.max_abs() > 0.0, "seed {seed}: zero gradient");

        // The attack gradient is a positive per-example rescaling of the exact one.
        let one = [draws[0]];
        let attack = target.expected_gradient(&x, &labels, &one).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let s = target.scores_graph(&mut g, xv, &one).unwrap();
        let l = g.cross_entropy(s, &labels).unwrap();
        g.backward(l).unwrap();
        let exact = g.grad_or_zeros(xv);
        for b in 0..batch {
            let (u, v) = (attack.row(b), exact.row(b));
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nv > 1e-12 {
                assert!(dot / (nu * nv) > 1.0 - 1e-9, "seed {seed} row {b}: cosine {}", dot / (nu * nv));
            }
        }
    }
}

/// Every check above, per-op suites first.
pub fn run_all() {
    elementwise_binary();
    add_bias();
    elementwise_unary();
    matmul_and_linear();
    convolutions();
    batch_norm_modes();
    softmax_family_and_losses();
    reductions_and_reshapes();
    composite_pipeline();
}
