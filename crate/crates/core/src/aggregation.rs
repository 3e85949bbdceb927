//! Turning the logits of N reconstructions into one prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::argmax;

/// Logits are clamped to `±CARSO_LOGIT_CLAMP` before the inner exponential of
/// the CARSO rule.
pub const CARSO_LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggregationError {
    #[error("cannot aggregate zero samples")]
    Empty,
    #[error("logit matrix {rows}x{cols} does not match {len} values")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("no sample {sample} / class {class} in a {rows}x{cols} logit matrix")]
    Index {
        sample: usize,
        class: usize,
        rows: usize,
        cols: usize,
    },
    #[error("unknown strategy `{0}` (expected carso, logit-mean or prob-mean)")]
    UnknownStrategy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Carso,
    LogitMean,
    ProbMean,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Carso, Strategy::LogitMean, Strategy::ProbMean];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Carso => "carso",
            Strategy::LogitMean => "logit-mean",
            Strategy::ProbMean => "prob-mean",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AggregationError::UnknownStrategy(s.to_string()))
    }
}

/// Row-major (samples x classes) logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    samples: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(samples: usize, classes: usize, values: Vec<f64>) -> Result<Self, AggregationError> {
        if samples * classes != values.len() || classes == 0 {
            return Err(AggregationError::Shape {
                rows: samples,
                cols: classes,
                len: values.len(),
            });
        }
        Ok(LogitMatrix {
            samples,
            classes,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AggregationError> {
        let classes = rows.first().map_or(0, Vec::len);
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), classes, values)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.classes..(a + 1) * self.classes]
    }

    pub fn get(&self, a: usize, i: usize) -> f64 {
        self.values[a * self.classes + i]
    }

    pub fn set(&mut self, a: usize, i: usize, v: f64) {
        self.values[a * self.classes + i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn without_sample(&self, a: usize) -> Result<Self, AggregationError> {
        let rows: Vec<Vec<f64>> = (0..self.samples)
            .filter(|&r| r != a)
            .map(|r| self.row(r).to_vec())
            .collect();
        if rows.is_empty() {
            return Err(AggregationError::Empty);
        }
        Self::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedPrediction {
    pub probs: Vec<f64>,
    pub class: usize,
    pub strategy: Strategy,
}

/// Stable softmax in f64.
pub fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn finish(probs: Vec<f64>, strategy: Strategy) -> AggregatedPrediction {
    AggregatedPrediction {
        class: argmax(&probs),
        probs,
        strategy,
    }
}

fn nonempty(l: &LogitMatrix) -> Result<(), AggregationError> {
    if l.samples == 0 {
        Err(AggregationError::Empty)
    } else {
        Ok(())
    }
}

/// Scores `s_i = sum_a exp(clamp(l_i^a))`; the CARSO probabilities are their
/// softmax, which equals the normalised product of `exp(exp(l_i^a))`.
pub fn carso_scores(l: &LogitMatrix) -> Vec<f64> {
    let mut s = vec![0.0; l.classes];
    for a in 0..l.samples {
        for (si, &v) in s.iter_mut().zip(l.row(a)) {
            *si += v.clamp(-CARSO_LOGIT_CLAMP, CARSO_LOGIT_CLAMP).exp();
        }
    }
    s
}

pub fn aggregate_carso(l: &LogitMatrix) -> Result<AggregatedPrediction, AggregationError> {
    nonempty(l)?;
    Ok(finish(softmax(&carso_scores(l)), Strategy::Carso))
}

pub fn aggregate_logit_mean(l: &LogitMatrix) -> Result<AggregatedPrediction, AggregationError> {
    nonempty(l)?;
    let mut s = vec![0.0; l.classes];
    for a in 0..l.samples {
        for (si, &v) in s.iter_mut().zip(l.row(a)) {
            *si += v;
        }
    }
    let n = l.samples as f64;
    s.iter_mut().for_each(|v| *v /= n);
    Ok(finish(softmax(&s), Strategy::LogitMean))
}

pub fn aggregate_prob_mean(l: &LogitMatrix) -> Result<AggregatedPrediction, AggregationError> {
    nonempty(l)?;
    let mut p = vec![0.0; l.classes];
    for a in 0..l.samples {
        for (pi, q) in p.iter_mut().zip(softmax(l.row(a))) {
            *pi += q;
        }
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(finish(p, Strategy::ProbMean))
}

pub fn aggregate(strategy: Strategy, l: &LogitMatrix) -> Result<AggregatedPrediction, AggregationError> {
    match strategy {
        Strategy::Carso => aggregate_carso(l),
        Strategy::LogitMean => aggregate_logit_mean(l),
        Strategy::ProbMean => aggregate_prob_mean(l),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    /// Push the targeted logit down to -40.
    Deflate,
    /// Push the targeted logit up to +40.
    Inflate,
}

pub const PROBE_LIMIT: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    pub logit: f64,
    pub results: Vec<AggregatedPrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub target_sample: usize,
    pub target_class: usize,
    pub mode: ProbeMode,
    pub strategies: Vec<Strategy>,
    pub baseline: Vec<AggregatedPrediction>,
    pub points: Vec<ProbePoint>,
    /// Per strategy, the first swept logit value at which the decision differs
    /// from the baseline.
    pub flip_at: Vec<Option<f64>>,
}

impl ProbeReport {
    pub fn flipped(&self, strategy: Strategy) -> Option<f64> {
        self.strategies
            .iter()
            .position(|&s| s == strategy)
            .and_then(|i| self.flip_at[i])
    }
}

/// Sweeps one logit from its current value to `∓PROBE_LIMIT` over `steps`
/// evenly spaced points, re-aggregating with every strategy at each point.
pub fn takeover_probe(
    l: &LogitMatrix,
    target_sample: usize,
    target_class: usize,
    mode: ProbeMode,
    strategies: &[Strategy],
    steps: usize,
) -> Result<ProbeReport, AggregationError> {
    nonempty(l)?;
    if target_sample >= l.samples || target_class >= l.classes {
        return Err(AggregationError::Index {
            sample: target_sample,
            class: target_class,
            rows: l.samples,
            cols: l.classes,
        });
    }
    let baseline = strategies
        .iter()
        .map(|&s| aggregate(s, l))
        .collect::<Result<Vec<_>, _>>()?;
    let start = l.get(target_sample, target_class);
    let end = match mode {
        ProbeMode::Deflate => -PROBE_LIMIT,
        ProbeMode::Inflate => PROBE_LIMIT,
    };
    let steps = steps.max(1);
    let mut flip_at = vec![None; strategies.len()];
    let mut points = Vec::with_capacity(steps);
    let mut probe = l.clone();
    for k in 1..=steps {
        let v = start + (end - start) * k as f64 / steps as f64;
        probe.set(target_sample, target_class, v);
        let results = strategies
            .iter()
            .map(|&s| aggregate(s, &probe))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, r) in results.iter().enumerate() {
            if flip_at[i].is_none() && r.class != baseline[i].class {
                flip_at[i] = Some(v);
            }
        }
        points.push(ProbePoint { logit: v, results });
    }
    Ok(ProbeReport {
        target_sample,
        target_class,
        mode,
        strategies: strategies.to_vec(),
        baseline,
        points,
        flip_at,
    })
}
