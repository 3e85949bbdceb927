//! Untargeted ℓ∞ attacks on cross-entropy: FGSM, PGD, PGD with expectation
//! over the target's randomness, and the mixed batches used for purifier
//! training.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::nets::{Classifier, Mode, NetError};
use crate::rng::{derive_key, Rng};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attack spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Target(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    EotPgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub eot_iterations: usize,
    pub random_init: bool,
    pub clip: (f64, f64),
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            eot_iterations: 1,
            random_init: false,
            clip: (0.0, 1.0),
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            epsilon,
            step_size,
            steps,
            eot_iterations: 1,
            random_init: true,
            clip: (0.0, 1.0),
        }
    }

    pub fn eot_pgd(epsilon: f64, step_size: f64, steps: usize, eot_iterations: usize) -> Self {
        AttackSpec {
            family: AttackFamily::EotPgd,
            eot_iterations,
            ..Self::pgd(epsilon, step_size, steps)
        }
    }

    /// PGD used for adversarial training: ε = 8/255, α = 0.01, 40 steps.
    pub fn paper_train() -> Self {
        Self::pgd(8.0 / 255.0, 0.01, 40)
    }

    /// Evaluation attack: 200 steps of α = 0.007 with 20 EoT draws.
    pub fn paper_eval_eot() -> Self {
        Self::eot_pgd(8.0 / 255.0, 0.007, 200, 20)
    }

    /// The evaluation attack rescaled to ε = 0.1 for 28×28 grayscale data.
    pub fn desk_eval_eot() -> Self {
        let eps = 0.1;
        Self::eot_pgd(eps, 0.007 * eps / (8.0 / 255.0), 200, 20)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::Spec(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be a finite value >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.eot_iterations == 0 {
            return bad("eot_iterations must be at least 1".into());
        }
        if !(self.clip.0 < self.clip.1) {
            return bad(format!("empty clipping range {:?}", self.clip));
        }
        if self.family != AttackFamily::Fgsm
            && self.epsilon > 0.0
            && !(self.step_size > 0.0 && self.step_size <= self.epsilon)
        {
            return bad(format!(
                "step size must satisfy 0 < alpha <= epsilon, got alpha={} epsilon={}",
                self.step_size, self.epsilon
            ));
        }
        Ok(())
    }
}

/// Something whose cross-entropy loss can be differentiated with respect to
/// its input. `draw` selects the target's internal randomness; deterministic
/// targets ignore it.
pub trait AttackTarget<T: Scalar> {
    /// A tensor with the sign (per element) and relative scale (within each
    /// example) of the gradient of the cross-entropy loss with respect to `x`.
    fn input_gradient(&self, x: &Tensor<T>, labels: &[usize], draw: u64) -> Result<Tensor<T>, AttackError>;

    /// Mean of [`AttackTarget::input_gradient`] over `draws`.
    fn expected_gradient(&self, x: &Tensor<T>, labels: &[usize], draws: &[u64]) -> Result<Tensor<T>, AttackError> {
        let mut acc = Tensor::<T>::zeros(x.shape());
        for &d in draws {
            let g = self.input_gradient(x, labels, d)?;
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        let n = T::of(draws.len() as f64);
        acc.data_mut().iter_mut().for_each(|v| *v = *v / n);
        Ok(acc)
    }
}

/// Cross-entropy gradient with respect to one row of logits, computed without
/// underflow. Returns `(direction, log_scale)` with
/// `softmax(s) - onehot(y) = exp(log_scale) * direction`; the target entry of
/// `direction` is exactly -1.
pub fn ce_logit_direction(s: &[f64], y: usize) -> (Vec<f64>, f64) {
    let lse = |skip: Option<usize>| {
        let m = s
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + s
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, &v)| (v - m).exp())
            .sum::<f64>()
            .ln()
    };
    let others = lse(Some(y));
    if others == f64::NEG_INFINITY {
        return (vec![0.0; s.len()], f64::NEG_INFINITY);
    }
    let dir = s
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == y { -1.0 } else { (v - others).exp() })
        .collect();
    (dir, others - lse(None))
}

/// Gradient seeds for a batch of logits: each row's direction, rescaled by
/// `exp(log_scale - max_log_scale)` across `groups` of consecutive rows that
/// share one example, then divided by the group size.
pub fn ce_seed<T: Scalar>(logits: &Tensor<T>, labels: &[usize], group: usize) -> Result<Tensor<T>, AttackError> {
    let (n, c) = (logits.batch(), logits.row_len());
    if labels.len() * group != n {
        return Err(AttackError::Target(format!(
            "{} labels with {group} rows each do not match {n} logit rows",
            labels.len()
        )));
    }
    let mut out = vec![T::zero(); n * c];
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(AttackError::Target(format!("label {y} out of range for {c} classes")));
        }
        let rows: Vec<(Vec<f64>, f64)> = (0..group)
            .map(|e| {
                let r: Vec<f64> = logits.row(b * group + e).iter().map(|v| v.as_f64()).collect();
                ce_logit_direction(&r, y)
            })
            .collect();
        let top = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        for (e, (dir, ls)) in rows.into_iter().enumerate() {
            let w = if top == f64::NEG_INFINITY { 0.0 } else { (ls - top).exp() / group as f64 };
            let base = (b * group + e) * c;
            for (j, d) in dir.into_iter().enumerate() {
                out[base + j] = T::of(d * w);
            }
        }
    }
    Ok(Tensor::new(vec![n, c], out)?)
}

/// A classifier attacked directly, with batch norm in evaluation mode.
impl<T: Scalar> AttackTarget<T> for Classifier<T> {
    fn input_gradient(&self, x: &Tensor<T>, labels: &[usize], _draw: u64) -> Result<Tensor<T>, AttackError> {
        let mut g = Graph::new();
        let mut sess = self.session(Mode::Eval, false);
        let xv = g.leaf(x.clone());
        let (logits, _) = self.forward_graph(&mut g, &mut sess, xv, false)?;
        let seed = ce_seed(g.value(logits), labels, 1)?;
        g.backward_with_seed(logits, seed)?;
        Ok(g.grad_or_zeros(xv))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome<T: Scalar = f32> {
    pub x_adv: Tensor<T>,
    /// Set when some step saw an all-zero gradient for the whole batch.
    pub zero_gradient: bool,
}

/// Clamps every entry of `delta` to `[-eps, eps]`.
pub fn project_linf<T: Scalar>(delta: &mut [T], eps: T) {
    for d in delta {
        *d = d.max(-eps).min(eps);
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// One ascent step: `delta <- P(delta + alpha * sign(grad))`, then shrunk so
/// that `x + delta` stays inside `clip`.
pub fn pgd_step<T: Scalar>(x: &[T], delta: &mut [T], grad: &[T], alpha: T, eps: T, clip: (f64, f64)) {
    let (lo, hi) = (T::of(clip.0), T::of(clip.1));
    for ((d, &g), &xi) in delta.iter_mut().zip(grad).zip(x) {
        let stepped = (*d + alpha * sign(g)).max(-eps).min(eps);
        *d = (xi + stepped).max(lo).min(hi) - xi;
    }
}

fn adv_from<T: Scalar>(x: &Tensor<T>, delta: &[T], clip: (f64, f64)) -> Tensor<T> {
    let (lo, hi) = (T::of(clip.0), T::of(clip.1));
    let data = x
        .data()
        .iter()
        .zip(delta)
        .map(|(&a, &d)| (a + d).max(lo).min(hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn check_batch<T: Scalar>(x: &Tensor<T>, labels: &[usize]) -> Result<(), AttackError> {
    if x.ndim() == 0 || x.batch() != labels.len() {
        return Err(AttackError::Target(format!(
            "{} labels for input of shape {:?}",
            labels.len(),
            x.shape()
        )));
    }
    Ok(())
}

/// Key of the randomness used for EoT draw `e` of step `k`.
pub fn draw_key(seed: u64, step: usize, e: usize) -> u64 {
    derive_key(seed, &[0xD4A3, step as u64, e as u64])
}

/// `clip(x + eps * sign(grad), 0, 1)`.
pub fn fgsm<T: Scalar, M: AttackTarget<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<AttackOutcome<T>, AttackError> {
    run(model, x, labels, &AttackSpec::fgsm(epsilon), seed)
}

pub fn pgd<T: Scalar, M: AttackTarget<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackOutcome<T>, AttackError> {
    let spec = AttackSpec {
        family: AttackFamily::Pgd,
        eot_iterations: 1,
        ..spec.clone()
    };
    run(model, x, labels, &spec, seed)
}

pub fn eot_pgd<T: Scalar, M: AttackTarget<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackOutcome<T>, AttackError> {
    let spec = AttackSpec {
        family: AttackFamily::EotPgd,
        ..spec.clone()
    };
    run(model, x, labels, &spec, seed)
}

/// Runs any attack family. FGSM is a single unprojected-start step of size ε;
/// PGD and EoT-PGD differ only in the number of gradient draws per step.
pub fn run<T: Scalar, M: AttackTarget<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackOutcome<T>, AttackError> {
    spec.validate()?;
    check_batch(x, labels)?;
    let eps = T::of(spec.epsilon);
    let mut delta = vec![T::zero(); x.numel()];
    if spec.epsilon == 0.0 {
        return Ok(AttackOutcome {
            x_adv: x.clone(),
            zero_gradient: false,
        });
    }
    let (alpha, steps, draws) = match spec.family {
        AttackFamily::Fgsm => (eps, 1, 1),
        AttackFamily::Pgd => (T::of(spec.step_size), spec.steps, 1),
        AttackFamily::EotPgd => (T::of(spec.step_size), spec.steps, spec.eot_iterations),
    };
    if spec.random_init && spec.family != AttackFamily::Fgsm {
        let mut rng = Rng::stream(seed, &[0x1417]);
        rng.fill_uniform(&mut delta, -spec.epsilon, spec.epsilon);
        let x_start = adv_from(x, &delta, spec.clip);
        for ((d, &a), &xi) in delta.iter_mut().zip(x_start.data()).zip(x.data()) {
            *d = a - xi;
        }
    }
    let mut zero_gradient = false;
    for k in 0..steps {
        let x_cur = adv_from(x, &delta, spec.clip);
        let keys: Vec<u64> = (0..draws).map(|e| draw_key(seed, k, e)).collect();
        let grad = if draws == 1 {
            model.input_gradient(&x_cur, labels, keys[0])?
        } else {
            model.expected_gradient(&x_cur, labels, &keys)?
        };
        if grad.data().iter().all(|v| *v == T::zero()) {
            zero_gradient = true;
        }
        pgd_step(x.data(), &mut delta, grad.data(), alpha, eps, spec.clip);
    }
    Ok(AttackOutcome {
        x_adv: adv_from(x, &delta, spec.clip),
        zero_gradient,
    })
}

/// One kind of perturbation in a mixed training batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub family: AttackFamily,
    /// Fraction of the full ε used by this variant.
    pub eps_scale: f64,
}

impl Variant {
    pub fn label(&self) -> String {
        let fam = match self.family {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::EotPgd => "eot_pgd",
        };
        if self.eps_scale == 1.0 {
            format!("{fam}_eps")
        } else {
            format!("{fam}_eps*{}", self.eps_scale)
        }
    }

    /// FGSM ε/2, PGD ε/2, FGSM ε, PGD ε.
    pub fn balanced() -> Vec<Variant> {
        vec![
            Variant { family: AttackFamily::Fgsm, eps_scale: 0.5 },
            Variant { family: AttackFamily::Pgd, eps_scale: 0.5 },
            Variant { family: AttackFamily::Fgsm, eps_scale: 1.0 },
            Variant { family: AttackFamily::Pgd, eps_scale: 1.0 },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedConfig {
    pub fraction: f64,
    pub epsilon: f64,
    /// PGD step size at full ε; scaled with each variant's ε.
    pub pgd_step_size: f64,
    pub pgd_steps: usize,
    pub variants: Vec<Variant>,
}

impl BalancedConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(AttackError::Spec(format!("fraction must lie in [0, 1], got {}", self.fraction)));
        }
        if self.fraction > 0.0 && self.variants.is_empty() {
            return Err(AttackError::Spec("no attack variants configured".into()));
        }
        for v in &self.variants {
            self.spec_for(v).validate()?;
        }
        Ok(())
    }

    fn spec_for(&self, v: &Variant) -> AttackSpec {
        let eps = self.epsilon * v.eps_scale;
        match v.family {
            AttackFamily::Fgsm => AttackSpec::fgsm(eps),
            _ => AttackSpec::pgd(eps, self.pgd_step_size * v.eps_scale, self.pgd_steps),
        }
    }
}

/// Splits `perturbed` examples over `k` variants as evenly as possible. The
/// variants receiving the remainder rotate with `batch_index`.
pub fn split_counts(perturbed: usize, k: usize, batch_index: u64) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let (base, rem) = (perturbed / k, perturbed % k);
    (0..k)
        .map(|v| {
            let slot = (v as u64 + k as u64 - batch_index % k as u64) % k as u64;
            base + usize::from((slot as usize) < rem)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalancedBatch<T: Scalar = f32> {
    pub inputs: Tensor<T>,
    /// Always the clean inputs.
    pub targets: Tensor<T>,
    /// Index into the configured variants, or `None` for clean examples.
    pub tags: Vec<Option<usize>>,
}

/// Perturbs the first `round(fraction * B)` examples of an already shuffled
/// batch, in consecutive runs per variant.
pub fn balanced_adversarial_batch<T: Scalar, M: AttackTarget<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &BalancedConfig,
    batch_index: u64,
    seed: u64,
) -> Result<BalancedBatch<T>, AttackError> {
    cfg.validate()?;
    check_batch(x, labels)?;
    let b = x.batch();
    let perturbed = (cfg.fraction * b as f64).round() as usize;
    let counts = split_counts(perturbed, cfg.variants.len(), batch_index);
    let mut tags = vec![None; b];
    let mut inputs = x.clone();
    let row = x.row_len();
    let mut start = 0;
    for (v, (&count, variant)) in counts.iter().zip(&cfg.variants).enumerate() {
        if count == 0 {
            continue;
        }
        let idx: Vec<usize> = (start..start + count).collect();
        let xs = x.select_rows(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let out = run(model, &xs, &ys, &cfg.spec_for(variant), derive_key(seed, &[v as u64]))?;
        inputs.data_mut()[start * row..(start + count) * row].copy_from_slice(out.x_adv.data());
        for t in &mut tags[start..start + count] {
            *t = Some(v);
        }
        start += count;
    }
    Ok(BalancedBatch {
        inputs,
        targets: x.clone(),
        tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_clamps() {
        let mut d = [0.5f64, -0.2];
        project_linf(&mut d, 0.3);
        assert_eq!(d, [0.3, -0.2]);
    }

    #[test]
    fn split_rotates_remainder() {
        assert_eq!(split_counts(4, 4, 0), vec![1, 1, 1, 1]);
        assert_eq!(split_counts(5, 4, 0), vec![2, 1, 1, 1]);
        assert_eq!(split_counts(5, 4, 1), vec![1, 2, 1, 1]);
        assert_eq!(split_counts(6, 4, 3), vec![2, 1, 1, 2]);
        let mut totals = [0; 4];
        for i in 0..100 {
            for (t, c) in totals.iter_mut().zip(split_counts(5, 4, i)) {
                *t += c;
            }
        }
        assert_eq!(totals, [125; 4]);
    }

    #[test]
    fn direction_matches_softmax_gradient() {
        let s = [1.0, -0.5, 2.0];
        let (dir, ls) = ce_logit_direction(&s, 2);
        let z: f64 = s.iter().map(|v: &f64| v.exp()).sum();
        for j in 0..3 {
            let p = s[j].exp() / z - if j == 2 { 1.0 } else { 0.0 };
            assert!((dir[j] * ls.exp() - p).abs() < 1e-12);
        }
        // saturated softmax keeps a usable direction
        let (dir, ls) = ce_logit_direction(&[200.0, 0.0], 0);
        assert_eq!(dir[0], -1.0);
        assert!(dir[1] > 0.0 && ls < -190.0);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::paper_train().validate().is_ok());
        assert!(AttackSpec::paper_eval_eot().validate().is_ok());
        assert!(AttackSpec::pgd(0.1, 0.2, 3).validate().is_err());
        assert!(AttackSpec::pgd(0.0, 0.0, 3).validate().is_ok());
        assert!(AttackSpec { steps: 0, ..AttackSpec::pgd(0.1, 0.01, 1) }.validate().is_err());
        let desk = AttackSpec::desk_eval_eot();
        assert!((desk.step_size - 0.0223125).abs() < 1e-12);
    }
}
