//! Robust inference: classify, capture the internal representation, decode N
//! conditional samples from the prior, re-classify them and aggregate.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationError, LogitMatrix, Strategy, CARSO_LOGIT_CLAMP};
use crate::attacks::{self, ce_seed, AttackError, AttackSpec, AttackTarget};
use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::nets::{Classifier, InternalRepresentation, Mode, NetError, Purifier};
use crate::rng::{derive_key, Rng};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("{0}")]
    Invalid(String),
}

impl From<PipelineError> for AttackError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Attack(a) => a,
            PipelineError::Net(n) => AttackError::Net(n),
            PipelineError::Tensor(t) => AttackError::Tensor(t),
            other => AttackError::Target(other.to_string()),
        }
    }
}

/// A classifier and the purifier trained against it.
#[derive(Clone, Debug)]
pub struct ModelStack<T: Scalar = f32> {
    pub classifier: Classifier<T>,
    pub purifier: Purifier<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustPrediction {
    pub probs: Vec<f64>,
    pub class: usize,
    /// (n_samples, classes) logits of the re-classified reconstructions.
    pub logits: Tensor<f32>,
    /// (n_samples, C, H, W), kept only on request.
    pub reconstructions: Option<Tensor<f32>>,
    pub n_samples: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

/// Records the aggregation on the graph. `logits` holds `n` consecutive rows
/// per group; the result is one row of scores per group whose softmax is the
/// aggregated probability vector.
pub fn aggregate_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    n: usize,
    strategy: Strategy,
) -> Result<Var, TensorError> {
    Ok(match strategy {
        Strategy::Carso => {
            let c = g.clamp(logits, T::of(-CARSO_LOGIT_CLAMP), T::of(CARSO_LOGIT_CLAMP));
            let e = g.exp(c);
            g.group_sum(e, n)?
        }
        Strategy::LogitMean => {
            let s = g.group_sum(logits, n)?;
            g.scale(s, T::of(1.0 / n as f64))
        }
        Strategy::ProbMean => {
            let p = g.softmax(logits)?;
            let s = g.group_sum(p, n)?;
            let m = g.scale(s, T::of(1.0 / n as f64));
            g.log(m)
        }
    })
}

/// Fills latent rows for `batch` examples, each with every draw in `draws`
/// and `n` samples per draw, ordered example-major.
fn latents<T: Scalar>(batch: usize, draws: &[u64], n: usize, width: usize) -> Tensor<T> {
    let mut z = Tensor::zeros(&[batch * draws.len() * n, width]);
    for (r, row) in z.data_mut().chunks_exact_mut(width).enumerate() {
        let a = r % n;
        let d = (r / n) % draws.len();
        let b = r / (n * draws.len());
        Rng::stream(draws[d], &[b as u64, a as u64]).fill_normal(row);
    }
    z
}

impl<T: Scalar> ModelStack<T> {
    pub fn new(classifier: Classifier<T>, purifier: Purifier<T>) -> Result<Self, PipelineError> {
        purifier.spec.check_compatible(&classifier.spec)?;
        Ok(ModelStack { classifier, purifier })
    }

    pub fn cast<U: Scalar>(&self) -> ModelStack<U> {
        ModelStack {
            classifier: self.classifier.cast(),
            purifier: self.purifier.cast(),
        }
    }

    /// The internal representation of `x`, the only thing the purifier sees.
    pub fn represent(&self, x: &Tensor<T>) -> Result<InternalRepresentation<T>, PipelineError> {
        let (_, rep) = self.classifier.forward(x, true)?;
        Ok(rep.expect("capture requested"))
    }

    /// `(B * n, C, H, W)` reconstructions decoded from the prior, conditioned
    /// on `rep`.
    pub fn purify_from_representation(
        &self,
        rep: &InternalRepresentation<T>,
        n: usize,
        seed: u64,
    ) -> Result<Tensor<T>, PipelineError> {
        let mut g = Graph::new();
        let vars: Vec<(String, Var)> = rep.layers.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
        let b = rep.layers.first().map_or(0, |(_, t)| t.batch());
        let out = self.decode_samples(&mut g, &vars, b, &[seed], n)?;
        Ok(g.value(out).clone())
    }

    fn decode_samples(
        &self,
        g: &mut Graph<T>,
        rep: &[(String, Var)],
        batch: usize,
        draws: &[u64],
        n: usize,
    ) -> Result<Var, PipelineError> {
        if n == 0 || draws.is_empty() {
            return Err(PipelineError::Invalid("at least one sample is required".into()));
        }
        let mut psess = self.purifier.session(Mode::Eval, false);
        let cc = self.purifier.encode_conditioning_graph(g, &mut psess, rep)?;
        let cc = g.repeat_rows(cc, draws.len() * n)?;
        let z = g.constant(latents(batch, draws, n, self.purifier.spec.fjoint));
        Ok(self.purifier.decode_graph(g, &mut psess, z, cc)?)
    }

    /// Records the whole pipeline for `x` (a graph node) and returns the
    /// `(B * draws * n, classes)` logits of the reconstructions.
    pub fn sample_logits_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        draws: &[u64],
        n: usize,
    ) -> Result<(Var, Var), PipelineError> {
        let batch = g.value(x).batch();
        let mut csess = self.classifier.session(Mode::Eval, false);
        let (_, taps) = self.classifier.forward_graph(g, &mut csess, x, true)?;
        let taps = taps.expect("capture requested");
        let recon = self.decode_samples(g, &taps, batch, draws, n)?;
        let (logits, _) = self.classifier.forward_graph(g, &mut csess, recon, false)?;
        Ok((logits, recon))
    }

    /// Robust predictions for every example of `x`.
    pub fn robust_predict(
        &self,
        x: &Tensor<T>,
        n_samples: usize,
        strategy: Strategy,
        seed: u64,
        keep_reconstructions: bool,
    ) -> Result<Vec<RobustPrediction>, PipelineError> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (logits, recon) = self.sample_logits_graph(&mut g, xv, &[seed], n_samples)?;
        let lv = g.value(logits);
        let classes = lv.row_len();
        let recon_row = g.value(recon).row_len();
        let mut out = Vec::with_capacity(x.batch());
        for b in 0..x.batch() {
            let rows: Vec<f64> = lv.data()[b * n_samples * classes..(b + 1) * n_samples * classes]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let agg = aggregate(strategy, &LogitMatrix::new(n_samples, classes, rows.clone())?)?;
            let reconstructions = keep_reconstructions.then(|| {
                let r = g.value(recon);
                let mut shape = r.shape().to_vec();
                shape[0] = n_samples;
                let span = b * n_samples * recon_row..(b + 1) * n_samples * recon_row;
                Tensor::new(shape, r.data()[span].iter().map(|v| v.as_f64() as f32).collect()).expect("slice")
            });
            out.push(RobustPrediction {
                probs: agg.probs,
                class: agg.class,
                logits: Tensor::new(vec![n_samples, classes], rows.iter().map(|&v| v as f32).collect())
                    .expect("slice"),
                reconstructions,
                n_samples,
                seed,
                strategy,
            });
        }
        Ok(out)
    }

    /// Differentiable view of the pipeline for attacks.
    pub fn target(&self, n_samples: usize, strategy: Strategy) -> PipelineTarget<'_, T> {
        PipelineTarget {
            stack: self,
            n_samples,
            strategy,
        }
    }
}

/// Attack surface of the full stochastic pipeline. The loss is cross-entropy
/// of the aggregated prediction; each draw key fixes the latent samples.
pub struct PipelineTarget<'a, T: Scalar = f32> {
    pub stack: &'a ModelStack<T>,
    pub n_samples: usize,
    pub strategy: Strategy,
}

impl<T: Scalar> PipelineTarget<'_, T> {
    /// Aggregated cross-entropy summed over the batch and averaged over draws,
    /// recorded on `g`. Returns the aggregated scores `(B * draws, C)`.
    pub fn scores_graph(&self, g: &mut Graph<T>, x: Var, draws: &[u64]) -> Result<Var, PipelineError> {
        let (logits, _) = self.stack.sample_logits_graph(g, x, draws, self.n_samples)?;
        Ok(aggregate_graph(g, logits, self.n_samples, self.strategy)?)
    }
}

impl<T: Scalar> AttackTarget<T> for PipelineTarget<'_, T> {
    fn input_gradient(&self, x: &Tensor<T>, labels: &[usize], draw: u64) -> Result<Tensor<T>, AttackError> {
        self.expected_gradient(x, labels, &[draw])
    }

    /// All draws in one graph; per-example gradient scale is normalised across
    /// draws in log space so saturated softmaxes still contribute a direction.
    fn expected_gradient(&self, x: &Tensor<T>, labels: &[usize], draws: &[u64]) -> Result<Tensor<T>, AttackError> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let scores = self.scores_graph(&mut g, xv, draws)?;
        let seed = ce_seed(g.value(scores), labels, draws.len())?;
        g.backward_with_seed(scores, seed)?;
        Ok(g.grad_or_zeros(xv))
    }
}

/// What is being evaluated.
pub enum Defense<'a> {
    Classifier(&'a Classifier),
    Pipeline {
        stack: &'a ModelStack,
        n_samples: usize,
        strategy: Strategy,
    },
}

/// Which model the attack differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackSurface {
    /// The evaluated model itself (the full pipeline for a pipeline defence).
    Defended,
    /// The bare classifier; the examples are then fed to the defence.
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub attack: Option<AttackSpec>,
    pub surface: AttackSurface,
    /// Latent samples used by the attacker when differentiating the pipeline.
    pub attack_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            attack: None,
            surface: AttackSurface::Defended,
            attack_samples: 8,
            batch_size: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub count: usize,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub per_class: Vec<ClassBreakdown>,
    pub attack: Option<AttackSpec>,
    pub wall_time: Duration,
}

fn predict(defense: &Defense<'_>, x: &Tensor<f32>, seed: u64) -> Result<Vec<usize>, PipelineError> {
    match defense {
        Defense::Classifier(c) => Ok(c.predict(x)?),
        Defense::Pipeline {
            stack,
            n_samples,
            strategy,
        } => Ok(stack
            .robust_predict(x, *n_samples, *strategy, seed, false)?
            .into_iter()
            .map(|p| p.class)
            .collect()),
    }
}

const EVAL: u64 = 0xE7A1;

/// Clean and (optionally) robust accuracy over `data`, with a per-class
/// breakdown.
pub fn evaluate(data: &Dataset, defense: &Defense<'_>, opts: &EvalOptions) -> Result<EvalReport, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Invalid("cannot evaluate on an empty split".into()));
    }
    if opts.batch_size == 0 {
        return Err(PipelineError::Invalid("batch size must be positive".into()));
    }
    if let Some(a) = &opts.attack {
        a.validate()?;
    }
    let started = Instant::now();
    let classes = data.num_classes;
    let mut count = vec![0usize; classes];
    let mut clean = vec![0usize; classes];
    let mut robust = vec![0usize; classes];
    let idx: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in idx.chunks(opts.batch_size).enumerate() {
        let (x, y) = data.batch(chunk);
        let bseed = derive_key(opts.seed, &[EVAL, b as u64]);
        let pred = predict(defense, &x, bseed)?;
        for (&p, &t) in pred.iter().zip(&y) {
            count[t] += 1;
            clean[t] += usize::from(p == t);
        }
        if let Some(spec) = &opts.attack {
            let aseed = derive_key(opts.seed, &[EVAL, b as u64, 1]);
            let adv = match (defense, opts.surface) {
                (Defense::Classifier(c), _) => attacks::run(*c, &x, &y, spec, aseed)?,
                (Defense::Pipeline { stack, .. }, AttackSurface::Classifier) => {
                    attacks::run(&stack.classifier, &x, &y, spec, aseed)?
                }
                (Defense::Pipeline { stack, strategy, .. }, AttackSurface::Defended) => {
                    attacks::run(&stack.target(opts.attack_samples, *strategy), &x, &y, spec, aseed)?
                }
            };
            let pred = predict(defense, &adv.x_adv, bseed)?;
            for (&p, &t) in pred.iter().zip(&y) {
                robust[t] += usize::from(p == t);
            }
        }
    }
    let total: usize = count.iter().sum();
    let frac = |hits: &[usize]| hits.iter().sum::<usize>() as f64 / total as f64;
    let per_class = (0..classes)
        .filter(|&c| count[c] > 0)
        .map(|c| ClassBreakdown {
            class: c,
            count: count[c],
            clean_acc: clean[c] as f64 / count[c] as f64,
            robust_acc: opts.attack.as_ref().map(|_| robust[c] as f64 / count[c] as f64),
        })
        .collect();
    Ok(EvalReport {
        examples: total,
        clean_acc: frac(&clean),
        robust_acc: opts.attack.as_ref().map(|_| frac(&robust)),
        per_class,
        attack: opts.attack.clone(),
        wall_time: started.elapsed(),
    })
}
