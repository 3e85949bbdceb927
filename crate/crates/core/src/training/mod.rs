//! Adversarial training of the classifier and conditional-VAE training of the
//! purifier.

mod checkpoint;
mod loss;
mod optim;
mod schedule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind, FORMAT_VERSION, MAGIC};
pub use loss::{kl_std_normal, vae_loss, VaeLoss};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use schedule::{BetaSchedule, LrSchedule};

use crate::attacks::{balanced_adversarial_batch, AttackError, AttackFamily, BalancedConfig, Variant};
use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::nets::{Classifier, Mode, NetError, Purifier, BN_MOMENTUM};
use crate::rng::{derive_key, Rng};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("classifier parameters changed during purifier training (hash {before} -> {after})")]
    FrozenMutated { before: String, after: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
    pub beta: BetaSchedule,
    /// Independent latent draws (and reconstruction losses) per input.
    pub samples_per_input: usize,
    /// Share of each batch replaced by adversarial examples.
    pub adversarial_fraction: f64,
    pub epsilon: f64,
    pub pgd_step_size: f64,
    pub pgd_steps: usize,
    pub variants: Vec<Variant>,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Purifier hyperparameters of the CIFAR-10 setting: 200 epochs at batch
    /// 5120 with half of every batch perturbed.
    pub fn paper_scenario_a() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 5120,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            lr: LrSchedule {
                initial: 5e-9,
                peak: 0.064,
                final_lr: 4.346e-4,
                warmup: 25,
                plateau: 25,
                anneal: 150,
            },
            beta: BetaSchedule {
                start: 25,
                end: 34,
                final_beta: 1.0,
            },
            samples_per_input: 8,
            adversarial_fraction: 0.5,
            epsilon: 8.0 / 255.0,
            pgd_step_size: 0.01,
            pgd_steps: 40,
            variants: Variant::balanced(),
            grad_clip: None,
        }
    }

    /// Small purifier run for 28×28 grayscale data at ε = 0.1.
    pub fn desk_purifier() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            lr: LrSchedule {
                initial: 1e-4,
                peak: 3e-3,
                final_lr: 1e-4,
                warmup: 3,
                plateau: 6,
                anneal: 21,
            },
            beta: BetaSchedule {
                start: 3,
                end: 6,
                final_beta: 1.0,
            },
            samples_per_input: 8,
            adversarial_fraction: 0.5,
            epsilon: 0.1,
            pgd_step_size: 0.025,
            pgd_steps: 7,
            variants: Variant::balanced(),
            grad_clip: None,
        }
    }

    /// PGD-7 adversarial training of the desk classifier (every example
    /// perturbed at full ε).
    pub fn desk_classifier() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(),
            lr: LrSchedule {
                initial: 1e-3,
                peak: 2e-3,
                final_lr: 1e-4,
                warmup: 1,
                plateau: 5,
                anneal: 4,
            },
            beta: BetaSchedule {
                start: 0,
                end: 0,
                final_beta: 0.0,
            },
            samples_per_input: 1,
            adversarial_fraction: 1.0,
            variants: vec![Variant {
                family: AttackFamily::Pgd,
                eps_scale: 1.0,
            }],
            ..Self::desk_purifier()
        }
    }

    pub fn balanced(&self) -> BalancedConfig {
        BalancedConfig {
            fraction: self.adversarial_fraction,
            epsilon: self.epsilon,
            pgd_step_size: self.pgd_step_size,
            pgd_steps: self.pgd_steps,
            variants: self.variants.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.lr.total() != self.epochs {
            return bad(format!(
                "warm-up + plateau + annealing epochs = {} must equal epochs = {}",
                self.lr.total(),
                self.epochs
            ));
        }
        if !(self.beta.start <= self.beta.end && self.beta.end <= self.epochs) {
            return bad(format!(
                "beta schedule needs start <= end <= epochs, got {} / {} / {}",
                self.beta.start, self.beta.end, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 (batch norm)".into());
        }
        if self.samples_per_input == 0 {
            return bad("samples per input must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        self.balanced().validate()?;
        Ok(())
    }
}

/// Per-epoch training summary. Purifier runs fill the VAE fields, classifier
/// runs the accuracy fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    /// Mean per-example loss.
    pub loss: f64,
    pub bce: f64,
    pub kl: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

pub struct ClassifierRun {
    pub classifier: Classifier,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochLog>,
}

pub struct PurifierRun {
    pub purifier: Purifier,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochLog>,
}

/// Resume point: completed epochs and optimiser state.
pub struct Resume {
    pub epoch: usize,
    pub optimizer: OptimizerState,
}

const SHUFFLE: u64 = 0x5A0F;
const ATTACK: u64 = 0xA77C;
const LATENT: u64 = 0x1A7E;

/// Full batches of a fresh permutation for `epoch`; the ragged tail is dropped.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let perm = Rng::stream(seed, &[SHUFFLE, epoch as u64]).permutation(n);
    perm.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn clip_grads<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Trains `classifier` on attacked batches: each step perturbs
/// `adversarial_fraction` of the batch against the current parameters and
/// descends cross-entropy on the result with the clean labels.
pub fn train_classifier_adversarial(
    data: &Dataset,
    cfg: &TrainConfig,
    mut classifier: Classifier,
    resume: Option<Resume>,
) -> Result<ClassifierRun, TrainError> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "{} training examples cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let balanced = cfg.balanced();
    let (start, mut opt) = match resume {
        Some(r) => (r.epoch, r.optimizer),
        None => (0, OptimizerState::new(cfg.optimizer)),
    };
    let mut history = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = cfg.lr.at(epoch as f64);
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let (mut loss_sum, mut clean_hits, mut adv_hits, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = data.batch(idx);
            let step = (epoch * batches.len() + b) as u64;
            let mixed = balanced_adversarial_batch(
                &classifier,
                &x,
                &y,
                &balanced,
                step,
                derive_key(cfg.seed, &[ATTACK, epoch as u64, b as u64]),
            )?;
            clean_hits += accuracy(&classifier.predict(&x)?, &y) * y.len() as f64;

            let mut g = Graph::new();
            let mut sess = classifier.session(Mode::Train, true);
            let xv = g.constant(mixed.inputs);
            let (logits, _) = classifier.forward_graph(&mut g, &mut sess, xv, false)?;
            adv_hits += accuracy(&g.value(logits).argmax_rows(), &y) * y.len() as f64;
            let loss = g.cross_entropy(logits, &y)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: lv });
            }
            g.backward(loss)?;
            let mut grads = sess.grads(&g);
            let stats = sess.take_bn_updates();
            drop(sess);
            clip_grads(&mut grads, cfg.grad_clip);
            opt.step(&mut classifier.params, &grads, lr)?;
            classifier.params.apply_batch_stats(&stats, BN_MOMENTUM)?;
            loss_sum += lv * y.len() as f64;
            seen += y.len();
        }
        let n = seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / n,
            clean_acc: clean_hits / n,
            adv_acc: adv_hits / n,
            ..EpochLog::default()
        };
        log::info!(
            "classifier epoch {epoch}: lr {lr:.3e} loss {:.4} clean {:.3} adv {:.3}",
            log.loss,
            log.clean_acc,
            log.adv_acc
        );
        history.push(log);
    }
    Ok(ClassifierRun {
        classifier,
        optimizer: opt,
        history,
    })
}

/// Graph nodes of one purifier training forward pass.
struct VaeGraph {
    loss: Var,
    bce: Var,
    kl: Var,
}

/// Records the training loss: for every input, `samples` reconstructions from
/// independent latent draws, each scored by summed BCE against the clean
/// target (averaged over draws), plus `beta` times the KL term; summed over
/// the batch and divided by its size.
#[allow(clippy::too_many_arguments)]
fn vae_graph<T: Scalar>(
    g: &mut Graph<T>,
    sess: &mut crate::nets::Session<'_, T>,
    purifier: &Purifier<T>,
    classifier: &Classifier<T>,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    samples: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<VaeGraph, TrainError> {
    let b = inputs.batch();
    let (_, rep) = classifier.forward(inputs, true)?;
    let rep = rep.expect("capture requested");
    let rep_vars: Vec<(String, Var)> = rep.layers.into_iter().map(|(n, t)| (n, g.constant(t))).collect();
    let x_std = g.constant(purifier.stats.standardize(inputs)?);
    let xc = purifier.encode_input_graph(g, sess, x_std)?;
    let cc = purifier.encode_conditioning_graph(g, sess, &rep_vars)?;
    let (mu, logvar) = purifier.joint_encode_graph(g, sess, xc, cc)?;

    let mu_r = g.repeat_rows(mu, samples)?;
    let lv_r = g.repeat_rows(logvar, samples)?;
    let cc_r = g.repeat_rows(cc, samples)?;
    let mut eps = Tensor::zeros(g.value(mu_r).shape());
    rng.fill_normal(eps.data_mut());
    let z = purifier.reparameterize_graph(g, mu_r, lv_r, eps)?;
    let logits = purifier.decode_logits_graph(g, sess, z, cc_r)?;

    let tv = g.constant(targets.clone());
    let tr = g.repeat_rows(tv, samples)?;
    let target_r = g.value(tr).clone();
    let bce = g.bce_with_logits_sum(logits, &target_r)?;
    let bce = g.scale(bce, T::of(1.0 / samples as f64));

    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -T::one());
    let kl = g.sum(t);
    let kl = g.scale(kl, T::of(0.5));

    let weighted = g.scale(kl, T::of(beta));
    let total = g.add(bce, weighted)?;
    let loss = g.scale(total, T::of(1.0 / b as f64));
    Ok(VaeGraph { loss, bce, kl })
}

/// Trains the purifier against a frozen classifier on mixed clean and
/// attacked batches, reconstructing the clean inputs.
pub fn train_purifier(
    data: &Dataset,
    classifier: &Classifier,
    mut purifier: Purifier,
    cfg: &TrainConfig,
    resume: Option<Resume>,
) -> Result<PurifierRun, TrainError> {
    cfg.validate()?;
    purifier.spec.check_compatible(&classifier.spec)?;
    if data.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "{} training examples cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut frozen = classifier.clone();
    frozen.params.freeze();
    let before = frozen.params.fingerprint();
    let balanced = cfg.balanced();
    let (start, mut opt) = match resume {
        Some(r) => (r.epoch, r.optimizer),
        None => (0, OptimizerState::new(cfg.optimizer)),
    };
    let mut history = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = cfg.lr.at(epoch as f64);
        let beta = cfg.beta.at(epoch as f64);
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let (mut loss_sum, mut bce_sum, mut kl_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = data.batch(idx);
            let step = (epoch * batches.len() + b) as u64;
            let mixed = balanced_adversarial_batch(
                &frozen,
                &x,
                &y,
                &balanced,
                step,
                derive_key(cfg.seed, &[ATTACK, epoch as u64, b as u64]),
            )?;
            let mut rng = Rng::stream(cfg.seed, &[LATENT, epoch as u64, b as u64]);
            let mut g = Graph::new();
            let mut sess = purifier.session(Mode::Train, true);
            let vg = vae_graph(
                &mut g,
                &mut sess,
                &purifier,
                &frozen,
                &mixed.inputs,
                &mixed.targets,
                cfg.samples_per_input,
                beta,
                &mut rng,
            )?;
            let lv = g.value(vg.loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: lv });
            }
            g.backward(vg.loss)?;
            let mut grads = sess.grads(&g);
            let stats = sess.take_bn_updates();
            drop(sess);
            clip_grads(&mut grads, cfg.grad_clip);
            opt.step(&mut purifier.params, &grads, lr)?;
            purifier.params.apply_batch_stats(&stats, BN_MOMENTUM)?;
            let n = y.len() as f64;
            loss_sum += lv * n;
            bce_sum += g.value(vg.bce).data()[0].as_f64();
            kl_sum += g.value(vg.kl).data()[0].as_f64();
            seen += y.len();
        }
        let after = frozen.params.fingerprint();
        if after != before || classifier.params.fingerprint() != before {
            return Err(TrainError::FrozenMutated { before, after });
        }
        let n = seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            beta,
            loss: loss_sum / n,
            bce: bce_sum / n,
            kl: kl_sum / n,
            ..EpochLog::default()
        };
        log::info!(
            "purifier epoch {epoch}: lr {lr:.3e} beta {beta:.3} loss {:.3} bce {:.3} kl {:.3}",
            log.loss,
            log.bce,
            log.kl
        );
        history.push(log);
    }
    Ok(PurifierRun {
        purifier,
        optimizer: opt,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_a_is_consistent() {
        TrainConfig::paper_scenario_a().validate().unwrap();
        TrainConfig::desk_purifier().validate().unwrap();
        TrainConfig::desk_classifier().validate().unwrap();
    }

    #[test]
    fn inconsistent_schedule_is_rejected() {
        let mut c = TrainConfig::paper_scenario_a();
        c.lr.anneal = 250;
        assert!(c.validate().unwrap_err().to_string().contains("must equal epochs"));
    }

    #[test]
    fn batches_are_full_and_disjoint() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 9);
        assert_ne!(epoch_batches(10, 3, 1, 0), epoch_batches(10, 3, 1, 1));
    }
}
