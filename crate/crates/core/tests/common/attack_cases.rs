//! Randomised attack cases on a softmax-regression target, checked for the
//! ε-ball and pixel-range invariants.

#![allow(dead_code)]

use carso::attacks::{self, project_linf, AttackError, AttackSpec, AttackTarget};
use carso::rng::Rng;
use carso::tensor::{Scalar, Tensor};

pub const SLACK: f64 = 1e-6;

/// Softmax regression `W x + b`; with `noise > 0` each draw perturbs `W`,
/// which makes it a stochastic target for EoT.
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
    pub noise: f64,
}

impl Linear {
    pub fn new(key: u64, dim: usize, classes: usize, noise: f64) -> Self {
        let mut rng = Rng::new(key);
        Linear {
            w: (0..dim * classes).map(|_| rng.normal()).collect(),
            b: (0..classes).map(|_| rng.normal()).collect(),
            classes,
            noise,
        }
    }

    pub fn logits(&self, w: &[f64], row: &[f64]) -> Vec<f64> {
        let d = row.len();
        (0..self.classes)
            .map(|c| self.b[c] + (0..d).map(|j| w[c * d + j] * row[j]).sum::<f64>())
            .collect()
    }
}

impl<T: Scalar> AttackTarget<T> for Linear {
    fn input_gradient(&self, x: &Tensor<T>, labels: &[usize], draw: u64) -> Result<Tensor<T>, AttackError> {
        let d = x.row_len();
        let mut rng = Rng::new(draw);
        let w: Vec<f64> = self.w.iter().map(|v| v + self.noise * rng.normal()).collect();
        let mut out = Vec::with_capacity(x.numel());
        for (r, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = x.row(r).iter().map(|v| v.as_f64()).collect();
            let p = carso::aggregation::softmax(&self.logits(&w, &row));
            out.extend((0..d).map(|j| {
                let g: f64 = (0..self.classes)
                    .map(|c| (p[c] - f64::from(u8::from(c == y))) * w[c * d + j])
                    .sum();
                T::of(g)
            }));
        }
        Ok(Tensor::new(x.shape().to_vec(), out)?)
    }
}

/// Inputs with a share of pixels sitting exactly on the range boundary.
pub fn image(rng: &mut Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| match rng.next_u64() % 5 {
        0 => 0.0,
        1 => 1.0,
        _ => rng.uniform(0.0, 1.0) as f32,
    })
}

pub fn check_bounds(x: &Tensor<f32>, x_adv: &Tensor<f32>, eps: f64) -> Result<(), String> {
    if x.shape() != x_adv.shape() {
        return Err(format!("shape {:?} became {:?}", x.shape(), x_adv.shape()));
    }
    for (&a, &b) in x.data().iter().zip(x_adv.data()) {
        if f64::from((b - a).abs()) > eps + SLACK {
            return Err(format!("|{b} - {a}| exceeds epsilon {eps}"));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(format!("{b} is outside [0, 1]"));
        }
    }
    Ok(())
}

pub struct Case {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub target: Linear,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
}

pub fn case(key: u64) -> Case {
    let mut rng = Rng::new(key);
    let batch = 1 + (rng.next_u64() % 4) as usize;
    let dim = 1 + (rng.next_u64() % 12) as usize;
    let classes = 2 + (rng.next_u64() % 4) as usize;
    let eps = match rng.next_u64() % 8 {
        0 => 0.0,
        1 => 1.0,
        _ => rng.uniform(1e-3, 0.5),
    };
    Case {
        x: image(&mut rng, &[batch, dim]),
        labels: (0..batch).map(|_| (rng.next_u64() % classes as u64) as usize).collect(),
        target: Linear::new(rng.next_u64(), dim, classes, rng.uniform(0.0, 1.0)),
        eps,
        alpha: eps * rng.uniform(0.05, 1.0),
        steps: 1 + (rng.next_u64() % 8) as usize,
        seed: rng.next_u64(),
    }
}

pub fn projection(v: &[f64], eps: f64) -> Result<(), String> {
    let mut d = v.to_vec();
    project_linf(&mut d, eps);
    for (&a, &b) in v.iter().zip(&d) {
        let want = if a.abs() <= eps { a } else { eps.copysign(a) };
        if b != want {
            return Err(format!("{a} projected to {b}, expected {want}"));
        }
    }
    let mut again = d.clone();
    project_linf(&mut again, eps);
    if again != d {
        return Err("projection is not idempotent".into());
    }
    Ok(())
}

pub fn fgsm(key: u64) -> Result<(), String> {
    let c = case(key);
    let out = attacks::fgsm(&c.target, &c.x, &c.labels, c.eps, c.seed).map_err(|e| e.to_string())?;
    check_bounds(&c.x, &out.x_adv, c.eps)
}

pub fn pgd(key: u64, random_init: bool) -> Result<(), String> {
    let c = case(key);
    let spec = AttackSpec {
        random_init,
        ..AttackSpec::pgd(c.eps, c.alpha, c.steps)
    };
    let out = attacks::pgd(&c.target, &c.x, &c.labels, &spec, c.seed).map_err(|e| e.to_string())?;
    check_bounds(&c.x, &out.x_adv, c.eps)
}

pub fn eot_pgd(key: u64, draws: usize) -> Result<(), String> {
    let c = case(key);
    let spec = AttackSpec::eot_pgd(c.eps, c.alpha, c.steps, draws);
    let out = attacks::eot_pgd(&c.target, &c.x, &c.labels, &spec, c.seed).map_err(|e| e.to_string())?;
    check_bounds(&c.x, &out.x_adv, c.eps)
}

/// One PGD step without random start is FGSM with budget α, bit for bit.
pub fn single_step_pgd_is_fgsm(key: u64) -> Result<(), String> {
    let c = case(key);
    let spec = AttackSpec {
        random_init: false,
        ..AttackSpec::pgd(c.eps, c.alpha, 1)
    };
    let pgd = attacks::pgd(&c.target, &c.x, &c.labels, &spec, c.seed).map_err(|e| e.to_string())?;
    let fgsm = attacks::fgsm(&c.target, &c.x, &c.labels, c.alpha, c.seed).map_err(|e| e.to_string())?;
    if pgd.x_adv != fgsm.x_adv {
        return Err(format!("case {key}: PGD(K=1) differs from FGSM"));
    }
    Ok(())
}
