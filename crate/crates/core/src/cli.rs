//! Command execution behind the `carso` binary. Each command reads a
//! resolved [`RunConfig`] and writes its artifacts into the output directory:
//! `config.toml`, `results.csv` (`metric,name,value`), `run.log` and any
//! checkpoints. Nothing written depends on the clock.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::aggregation::{takeover_probe, AggregationError, LogitMatrix, Strategy};
use crate::attacks::{AttackError, AttackSpec};
use crate::config::{ConfigError, DefenseKind, RunConfig, Task};
use crate::data::{load_split, DataError, Dataset, Split};
use crate::nets::{Classifier, NetError, Purifier, PurifierSpec};
use crate::pipeline::{evaluate, Defense, EvalOptions, EvalReport, ModelStack, PipelineError};
use crate::rng::derive_key;
use crate::training::{
    train_classifier_adversarial, train_purifier, Checkpoint, CheckpointError, EpochLog, ModelKind, Resume,
    TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("incompatible models: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Checkpoint(_) | CliError::Mismatch(_) => "checkpoint",
            CliError::Io { .. } | CliError::Exists(_) => "io",
            _ => "compute",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "io" => 4,
            "checkpoint" => 5,
            _ => 6,
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const LOG_FILE: &str = "run.log";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const PURIFIER_FILE: &str = "purifier.ckpt";

const INIT_CLASSIFIER: u64 = 0xC1;
const INIT_PURIFIER: u64 = 0xB1;
const EVAL: u64 = 0xE1;
const PROBE: u64 = 0xB0;

/// Rows and log lines collected while a command runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, String, String)>,
    pub log: Vec<String>,
}

impl Report {
    pub fn row(&mut self, metric: &str, name: impl Display, value: impl Display) {
        self.rows.push((metric.to_string(), name.to_string(), value.to_string()));
    }

    pub fn say(&mut self, line: impl Into<String>) {
        let line = line.into();
        log::info!("{line}");
        self.log.push(line);
    }

    /// Value of the first row with this metric and name.
    pub fn get(&self, metric: &str, name: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|(m, n, _)| m == metric && n == name)
            .map(|(_, _, v)| v.as_str())
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "name", "value"]).expect("in-memory write");
        for (m, n, v) in &self.rows {
            w.write_record([m, n, v]).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn artifacts(task: Task) -> Vec<&'static str> {
    let mut v = vec![CONFIG_FILE, RESULTS_FILE, LOG_FILE];
    match task {
        Task::TrainClassifier => v.push(CLASSIFIER_FILE),
        Task::TrainPurifier => v.push(PURIFIER_FILE),
        _ => {}
    }
    v
}

/// Validates, runs the configured task and writes its artifacts.
pub fn run(cfg: &RunConfig, force: bool) -> Result<Report, CliError> {
    cfg.validate()?;
    let out = cfg.out.clone().expect("validated");
    if !force {
        for name in artifacts(cfg.task) {
            let p = out.join(name);
            if p.exists() {
                return Err(CliError::Exists(p));
            }
        }
    }
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    let started = Instant::now();
    let hash = cfg.hash();
    let mut report = Report::default();
    report.row("meta", "task", serde_plain(cfg.task));
    report.row("meta", "config_hash", &hash);
    report.row("meta", "seed", cfg.seed());
    report.say(format!("task {} seed {} config {hash}", serde_plain(cfg.task), cfg.seed()));

    let meta: BTreeMap<String, String> =
        [("config_hash".to_string(), hash.clone()), ("seed".to_string(), cfg.seed().to_string())].into();
    match cfg.task {
        Task::TrainClassifier => {
            let ckpt = train_classifier_cmd(cfg, meta, &mut report)?;
            ckpt.save(&out.join(CLASSIFIER_FILE))?;
        }
        Task::TrainPurifier => {
            let ckpt = train_purifier_cmd(cfg, meta, &mut report)?;
            ckpt.save(&out.join(PURIFIER_FILE))?;
        }
        Task::Eval => eval_cmd(cfg, &mut report)?,
        Task::AttackSweep => sweep_cmd(cfg, &mut report)?,
        Task::TakeoverProbe => probe_cmd(cfg, &mut report)?,
    }

    let write = |name: &str, bytes: &[u8]| {
        let p = out.join(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))
    };
    write(CONFIG_FILE, format!("# config_hash = \"{hash}\"\n{}", cfg.to_toml()).as_bytes())?;
    write(RESULTS_FILE, &report.to_csv())?;
    let mut log = report.log.join("\n");
    log.push('\n');
    write(LOG_FILE, log.as_bytes())?;
    eprintln!("wall time: {:.1} s", started.elapsed().as_secs_f64());
    Ok(report)
}

fn serde_plain<T: serde::Serialize>(v: T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn load_data(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let d = load_split(&cfg.dataset, split)?;
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    Ok(if limit > 0 { d.head(limit) } else { d })
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != ModelKind::Classifier {
        return Err(CliError::Mismatch(format!("{} is not a classifier checkpoint", path.display())));
    }
    let c = Classifier::from_parts(ckpt.classifier.clone(), ckpt.params.clone())?;
    Ok((c, ckpt))
}

/// Loads a purifier checkpoint and checks it was trained against `classifier`.
pub fn load_purifier(path: &Path, classifier: &Classifier) -> Result<(Purifier, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != ModelKind::Purifier {
        return Err(CliError::Mismatch(format!("{} is not a purifier checkpoint", path.display())));
    }
    if ckpt.classifier != classifier.spec {
        return Err(CliError::Mismatch(format!(
            "{} was trained against a different classifier architecture",
            path.display()
        )));
    }
    if let Some(fp) = ckpt.metadata.get("classifier_fingerprint") {
        if *fp != classifier.params.fingerprint() {
            return Err(CliError::Mismatch(format!(
                "{} was trained against different classifier weights",
                path.display()
            )));
        }
    }
    let spec: PurifierSpec = ckpt
        .purifier
        .clone()
        .ok_or_else(|| CliError::Mismatch("purifier checkpoint without a purifier spec".into()))?;
    let stats = ckpt
        .stats
        .clone()
        .ok_or_else(|| CliError::Mismatch("purifier checkpoint without dataset stats".into()))?;
    let p = Purifier::from_parts(spec, ckpt.params.clone(), stats)?;
    Ok((p, ckpt))
}

fn resume_from(cfg: &RunConfig, kind: ModelKind) -> Result<Option<(Checkpoint, Resume)>, CliError> {
    let Some(path) = &cfg.resume else {
        return Ok(None);
    };
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != kind {
        return Err(CliError::Mismatch(format!("{} holds the wrong model kind", path.display())));
    }
    let optimizer = ckpt
        .optimizer
        .clone()
        .ok_or_else(|| CliError::Mismatch(format!("{} has no optimiser state to resume", path.display())))?;
    let r = Resume {
        epoch: ckpt.epoch,
        optimizer,
    };
    Ok(Some((ckpt, r)))
}

fn epoch_rows(report: &mut Report, history: &[EpochLog], vae: bool) {
    for e in history {
        let n = e.epoch;
        report.row("lr", n, e.lr);
        if vae {
            report.row("beta", n, e.beta);
            report.row("loss", n, e.loss);
            report.row("bce", n, e.bce);
            report.row("kl", n, e.kl);
            report.say(format!("epoch {n}: loss {:.4} bce {:.4} kl {:.4} beta {:.3}", e.loss, e.bce, e.kl, e.beta));
        } else {
            report.row("loss", n, e.loss);
            report.row("train_clean_acc", n, e.clean_acc);
            report.row("train_adv_acc", n, e.adv_acc);
            report.say(format!(
                "epoch {n}: loss {:.4} clean {:.4} attacked {:.4}",
                e.loss, e.clean_acc, e.adv_acc
            ));
        }
    }
}

fn train_classifier_cmd(
    cfg: &RunConfig,
    metadata: BTreeMap<String, String>,
    report: &mut Report,
) -> Result<Checkpoint, CliError> {
    let train = load_data(cfg, Split::Train)?;
    let test = load_data(cfg, Split::Test)?;
    let tc = cfg.train_config()?;
    let (classifier, resume) = match resume_from(cfg, ModelKind::Classifier)? {
        Some((ckpt, r)) => (Classifier::from_parts(ckpt.classifier, ckpt.params)?, Some(r)),
        None => {
            let spec = cfg.classifier_spec(train.image_shape(), train.num_classes);
            (Classifier::init(spec, derive_key(cfg.seed(), &[INIT_CLASSIFIER]))?, None)
        }
    };
    report.say(format!(
        "training classifier on {} examples for {} epochs",
        train.len(),
        tc.epochs
    ));
    let run = train_classifier_adversarial(&train, &tc, classifier, resume)?;
    epoch_rows(report, &run.history, false);
    let acc = evaluate(&test, &Defense::Classifier(&run.classifier), &EvalOptions::default())?.clean_acc;
    report.row("test_clean_acc", "classifier", acc);
    report.say(format!("test clean accuracy {acc:.4}"));
    Ok(Checkpoint {
        kind: ModelKind::Classifier,
        classifier: run.classifier.spec.clone(),
        purifier: None,
        stats: None,
        epoch: tc.epochs,
        seed: cfg.seed(),
        params: run.classifier.params,
        optimizer: Some(run.optimizer),
        metadata,
    })
}

fn train_purifier_cmd(
    cfg: &RunConfig,
    mut metadata: BTreeMap<String, String>,
    report: &mut Report,
) -> Result<Checkpoint, CliError> {
    let (classifier, _) = load_classifier(cfg.classifier_checkpoint.as_ref().expect("validated"))?;
    let train = load_data(cfg, Split::Train)?;
    let test = load_data(cfg, Split::Test)?;
    let tc = cfg.train_config()?;
    let (purifier, resume) = match resume_from(cfg, ModelKind::Purifier)? {
        Some((_, r)) => {
            let (p, _) = load_purifier(cfg.resume.as_ref().expect("checked"), &classifier)?;
            (p, Some(r))
        }
        None => {
            let spec = PurifierSpec::for_classifier(&classifier.spec, cfg.purifier_widths())?;
            let stats = train.stats()?;
            (Purifier::init(spec, stats, derive_key(cfg.seed(), &[INIT_PURIFIER]))?, None)
        }
    };
    report.say(format!(
        "training purifier on {} examples for {} epochs (adversarial fraction {})",
        train.len(),
        tc.epochs,
        tc.adversarial_fraction
    ));
    let run = train_purifier(&train, &classifier, purifier, &tc, resume)?;
    epoch_rows(report, &run.history, true);
    let stack = ModelStack::new(classifier, run.purifier)?;
    let acc = evaluate(
        &test,
        &Defense::Pipeline {
            stack: &stack,
            n_samples: cfg.n_samples,
            strategy: cfg.strategy,
        },
        &EvalOptions {
            seed: derive_key(cfg.seed(), &[EVAL]),
            batch_size: cfg.eval_batch,
            ..EvalOptions::default()
        },
    )?
    .clean_acc;
    report.row("test_clean_acc", "pipeline", acc);
    report.say(format!("pipeline test clean accuracy {acc:.4}"));
    metadata.insert("classifier_fingerprint".into(), stack.classifier.params.fingerprint());
    Ok(Checkpoint {
        kind: ModelKind::Purifier,
        classifier: stack.classifier.spec.clone(),
        purifier: Some(stack.purifier.spec.clone()),
        stats: Some(stack.purifier.stats.clone()),
        epoch: tc.epochs,
        seed: cfg.seed(),
        params: stack.purifier.params,
        optimizer: Some(run.optimizer),
        metadata,
    })
}

/// The classifier and, when the config asks for it, the purifier.
pub struct Models {
    pub classifier: Classifier,
    pub stack: Option<ModelStack>,
}

pub fn load_models(cfg: &RunConfig) -> Result<Models, CliError> {
    let (classifier, _) = load_classifier(cfg.classifier_checkpoint.as_ref().expect("validated"))?;
    let stack = match &cfg.purifier_checkpoint {
        Some(p) if cfg.needs_purifier() => {
            let (purifier, _) = load_purifier(p, &classifier)?;
            Some(ModelStack::new(classifier.clone(), purifier)?)
        }
        _ => None,
    };
    Ok(Models { classifier, stack })
}

impl Models {
    pub fn defense(&self, cfg: &RunConfig) -> Defense<'_> {
        match (&self.stack, cfg.defense) {
            (Some(stack), DefenseKind::Pipeline) => Defense::Pipeline {
                stack,
                n_samples: cfg.n_samples,
                strategy: cfg.strategy,
            },
            _ => Defense::Classifier(&self.classifier),
        }
    }
}

fn eval_options(cfg: &RunConfig, attack: Option<AttackSpec>) -> EvalOptions {
    EvalOptions {
        attack,
        surface: cfg.attack_surface,
        attack_samples: cfg.attack_samples,
        batch_size: cfg.eval_batch,
        seed: derive_key(cfg.seed(), &[EVAL]),
    }
}

fn check_labels(test: &Dataset, classifier: &Classifier) -> Result<(), CliError> {
    if test.labels.iter().any(|&y| y >= classifier.spec.num_classes) {
        return Err(CliError::Mismatch(format!(
            "test labels exceed the classifier's {} classes",
            classifier.spec.num_classes
        )));
    }
    if test.image_shape() != classifier.spec.input_shape {
        return Err(CliError::Mismatch(format!(
            "test images are {:?}, the classifier expects {:?}",
            test.image_shape(),
            classifier.spec.input_shape
        )));
    }
    Ok(())
}

fn report_eval(report: &mut Report, label: &str, r: &EvalReport) {
    report.row("clean_acc", label, r.clean_acc);
    if let Some(a) = r.robust_acc {
        report.row("robust_acc", label, a);
    }
    for c in &r.per_class {
        report.row("class_count", c.class, c.count);
        report.row("class_clean_acc", c.class, c.clean_acc);
        if let Some(a) = c.robust_acc {
            report.row("class_robust_acc", c.class, a);
        }
    }
    report.say(format!(
        "{label}: {} examples, clean {:.4}, robust {}",
        r.examples,
        r.clean_acc,
        r.robust_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
    ));
    eprintln!("evaluation took {:.1} s", r.wall_time.as_secs_f64());
}

fn attack_rows(report: &mut Report, spec: &AttackSpec, cfg: &RunConfig) {
    report.row("attack", "family", serde_plain(spec.family));
    report.row("attack", "epsilon", spec.epsilon);
    report.row("attack", "step_size", spec.step_size);
    report.row("attack", "steps", spec.steps);
    report.row("attack", "eot_iterations", spec.eot_iterations);
    report.row("attack", "surface", serde_plain(cfg.attack_surface));
    report.row("attack", "attack_samples", cfg.attack_samples);
}

fn defense_label(cfg: &RunConfig) -> &'static str {
    match cfg.defense {
        DefenseKind::Classifier => "classifier",
        DefenseKind::Pipeline => "pipeline",
    }
}

fn eval_cmd(cfg: &RunConfig, report: &mut Report) -> Result<(), CliError> {
    let models = load_models(cfg)?;
    let test = load_data(cfg, Split::Test)?;
    check_labels(&test, &models.classifier)?;
    let attack = cfg.attack_spec();
    if let Some(a) = &attack {
        attack_rows(report, a, cfg);
    }
    let r = evaluate(&test, &models.defense(cfg), &eval_options(cfg, attack))?;
    report_eval(report, defense_label(cfg), &r);
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, report: &mut Report) -> Result<(), CliError> {
    let models = load_models(cfg)?;
    let test = load_data(cfg, Split::Test)?;
    check_labels(&test, &models.classifier)?;
    let defense = models.defense(cfg);
    let clean = evaluate(&test, &defense, &eval_options(cfg, None))?;
    report.row("clean_acc", defense_label(cfg), clean.clean_acc);
    for &eps in &cfg.sweep_epsilons {
        let spec = cfg.attack_spec_at(eps).expect("validated");
        let r = evaluate(&test, &defense, &eval_options(cfg, Some(spec)))?;
        let acc = r.robust_acc.expect("attack present");
        report.row("robust_acc", format!("eps={eps}"), acc);
        report.say(format!("epsilon {eps}: robust accuracy {acc:.4}"));
    }
    Ok(())
}

fn probe_cmd(cfg: &RunConfig, report: &mut Report) -> Result<(), CliError> {
    let models = load_models(cfg)?;
    let stack = models.stack.as_ref().expect("validated");
    let test = load_data(cfg, Split::Test)?;
    check_labels(&test, &models.classifier)?;
    if cfg.probe_example >= test.len() {
        return Err(ConfigError::Invalid(format!(
            "probe_example {} out of range for {} test examples",
            cfg.probe_example,
            test.len()
        ))
        .into());
    }
    let (x, y) = test.batch(&[cfg.probe_example]);
    let pred = stack
        .robust_predict(&x, cfg.n_samples, cfg.strategy, derive_key(cfg.seed(), &[PROBE]), false)?
        .remove(0);
    let logits = LogitMatrix::new(
        cfg.n_samples,
        pred.logits.shape()[1],
        pred.logits.data().iter().map(|&v| f64::from(v)).collect(),
    )?;
    let class = cfg.probe_class.unwrap_or(y[0]);
    let r = takeover_probe(&logits, cfg.probe_sample, class, cfg.probe_mode, &Strategy::ALL, cfg.probe_steps)?;
    report.row("probe", "label", y[0]);
    report.row("probe", "class", class);
    report.row("probe", "sample", cfg.probe_sample);
    report.row("probe", "mode", serde_plain(cfg.probe_mode));
    for (i, s) in r.strategies.iter().enumerate() {
        report.row("baseline_class", s.name(), r.baseline[i].class);
        report.row(
            "flip_at",
            s.name(),
            r.flip_at[i].map_or("none".to_string(), |v| v.to_string()),
        );
        report.say(format!(
            "{}: baseline class {}, decision {}",
            s.name(),
            r.baseline[i].class,
            r.flip_at[i].map_or("never changes".to_string(), |v| format!("changes at logit {v}"))
        ));
    }
    for p in &r.points {
        for (s, a) in r.strategies.iter().zip(&p.results) {
            report.row("probe_class", format!("{}@{}", s.name(), p.logit), a.class);
            report.row("probe_target_prob", format!("{}@{}", s.name(), p.logit), a.probs[class]);
        }
    }
    Ok(())
}
