//! Run configuration: one flat TOML table. Values are resolved as built-in
//! defaults, then the preset, then the file, then command-line overrides.
//!
//! Training keys left unset fall back to the defaults of the task (the desk
//! classifier recipe for `train-classifier`, the desk purifier recipe
//! otherwise, or the large-scale recipe under the `paper-train` preset).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{ProbeMode, Strategy};
use crate::attacks::{AttackFamily, AttackSpec, Variant};
use crate::nets::{ClassifierSpec, PurifierWidths};
use crate::pipeline::AttackSurface;
use crate::training::{BetaSchedule, LrSchedule, OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainClassifier,
    TrainPurifier,
    Eval,
    AttackSweep,
    TakeoverProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Large-scale training hyperparameters and the FGSM/PGD training attack.
    PaperTrain,
    /// The PGD+EoT evaluation attack at ε = 8/255.
    PaperEvalEot,
    /// Small networks and ε = 0.1 for 28×28 grayscale digits.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    EotPgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    Classifier,
    Pipeline,
}

/// Every key of the configuration file. See `docs/config.md` for meanings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    pub dataset: PathBuf,
    pub dataset_format: DatasetFormat,
    /// Use only the first n training / test examples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,

    pub classifier_widths: [usize; 4],
    pub classifier_hidden: usize,
    pub fcrepr: usize,
    pub fjoint: usize,
    pub input_encoder_channels: [usize; 2],
    pub decoder_channels: [usize; 3],

    pub classifier_checkpoint: Option<PathBuf>,
    pub purifier_checkpoint: Option<PathBuf>,
    /// Continue training from this checkpoint (must carry optimiser state).
    pub resume: Option<PathBuf>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub lr_initial: Option<f64>,
    pub lr_peak: Option<f64>,
    pub lr_final: Option<f64>,
    pub lr_warmup: Option<usize>,
    pub lr_plateau: Option<usize>,
    pub lr_anneal: Option<usize>,
    pub beta_start: Option<usize>,
    pub beta_end: Option<usize>,
    pub beta_final: Option<f64>,
    pub samples_per_input: Option<usize>,
    pub adversarial_fraction: Option<f64>,
    pub train_epsilon: Option<f64>,
    pub train_step_size: Option<f64>,
    pub train_steps: Option<usize>,
    /// Entries like "fgsm:0.5" or "pgd:1".
    pub train_variants: Option<Vec<String>>,
    pub grad_clip: Option<f64>,

    pub attack: AttackKind,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub eot_iterations: usize,
    pub random_init: bool,
    pub attack_surface: AttackSurface,
    pub attack_samples: usize,

    pub defense: DefenseKind,
    pub strategy: Strategy,
    pub n_samples: usize,
    pub eval_batch: usize,

    pub sweep_epsilons: Vec<f64>,

    pub probe_example: usize,
    pub probe_sample: usize,
    /// Class whose logit is swept; defaults to the example's label.
    pub probe_class: Option<usize>,
    pub probe_mode: ProbeMode,
    pub probe_steps: usize,
}

pub const DESK_EPSILON: f64 = 0.1;
const PAPER_EPSILON: f64 = 8.0 / 255.0;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Eval,
            seed: None,
            out: None,
            dataset: PathBuf::from("data"),
            dataset_format: DatasetFormat::Idx,
            train_limit: 0,
            test_limit: 0,
            classifier_widths: [8, 16, 16, 32],
            classifier_hidden: 64,
            fcrepr: PurifierWidths::default().fcrepr,
            fjoint: PurifierWidths::default().fjoint,
            input_encoder_channels: PurifierWidths::default().input_channels,
            decoder_channels: PurifierWidths::default().decoder_channels,
            classifier_checkpoint: None,
            purifier_checkpoint: None,
            resume: None,
            epochs: None,
            batch_size: None,
            optimizer: None,
            lr_initial: None,
            lr_peak: None,
            lr_final: None,
            lr_warmup: None,
            lr_plateau: None,
            lr_anneal: None,
            beta_start: None,
            beta_end: None,
            beta_final: None,
            samples_per_input: None,
            adversarial_fraction: None,
            train_epsilon: None,
            train_step_size: None,
            train_steps: None,
            train_variants: None,
            grad_clip: None,
            attack: AttackKind::EotPgd,
            epsilon: DESK_EPSILON,
            step_size: 0.007 * DESK_EPSILON / PAPER_EPSILON,
            steps: 200,
            eot_iterations: 20,
            random_init: true,
            attack_surface: AttackSurface::Defended,
            attack_samples: 8,
            defense: DefenseKind::Pipeline,
            strategy: Strategy::Carso,
            n_samples: 8,
            eval_batch: 100,
            sweep_epsilons: vec![0.0, 0.05, 0.1, 0.2],
            probe_example: 0,
            probe_sample: 0,
            probe_class: None,
            probe_mode: ProbeMode::Deflate,
            probe_steps: 41,
        }
    }
}

/// Keys a preset writes on top of the defaults.
fn preset_table(preset: Preset) -> toml::Table {
    let src = match preset {
        Preset::Desk => "",
        Preset::PaperTrain => {
            r#"
            fcrepr = 512
            fjoint = 128
            epochs = 200
            batch_size = 5120
            optimizer = "radam-lookahead"
            lr_initial = 5e-9
            lr_peak = 0.064
            lr_final = 4.346e-4
            lr_warmup = 25
            lr_plateau = 25
            lr_anneal = 150
            beta_start = 25
            beta_end = 34
            adversarial_fraction = 0.5
            train_epsilon = 0.03137254901960784
            train_step_size = 0.01
            train_steps = 40
            train_variants = ["fgsm:0.5", "pgd:0.5", "fgsm:1", "pgd:1"]
            attack = "pgd"
            epsilon = 0.03137254901960784
            step_size = 0.01
            steps = 40
            eot_iterations = 1
            "#
        }
        Preset::PaperEvalEot => {
            r#"
            attack = "eot-pgd"
            epsilon = 0.03137254901960784
            step_size = 0.007
            steps = 200
            eot_iterations = 20
            n_samples = 8
            attack_samples = 8
            "#
        }
    };
    src.parse().expect("preset tables are valid TOML")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        base.insert(k, v);
    }
}

/// A `key=value` override; the value is read as TOML, falling back to a bare
/// string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override `{s}` is not key=value")))?;
    let k = k.trim().to_string();
    let parsed: Result<toml::Table, _> = format!("v = {v}").parse();
    let value = match parsed {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.trim().to_string()),
    };
    Ok((k, value))
}

impl RunConfig {
    /// Resolves the layered configuration.
    pub fn resolve(
        task: Task,
        preset: Option<Preset>,
        file: Option<&Path>,
        overrides: Vec<(String, toml::Value)>,
    ) -> Result<Self, ConfigError> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(p) = preset {
            merge(&mut table, preset_table(p));
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let t: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Parse(format!("{}: {e}", path.display())))?;
            merge(&mut table, t);
        }
        merge(&mut table, overrides.into_iter().collect());
        table.insert("task".into(), toml::Value::try_from(task).expect("task serialises"));
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seed.is_none() {
            return bad("a seed is required (set `seed` or pass --seed)".into());
        }
        if self.out.is_none() {
            return bad("an output directory is required (set `out` or pass --out)".into());
        }
        if !self.dataset.is_dir() {
            return bad(format!("dataset directory {} does not exist", self.dataset.display()));
        }
        for (key, path, needed) in [
            ("classifier_checkpoint", &self.classifier_checkpoint, self.task != Task::TrainClassifier),
            ("purifier_checkpoint", &self.purifier_checkpoint, self.needs_purifier()),
            ("resume", &self.resume, false),
        ] {
            match path {
                Some(p) if !p.is_file() => return bad(format!("{key} {} does not exist", p.display())),
                None if needed => return bad(format!("`{key}` is required for this task")),
                _ => {}
            }
        }
        if self.n_samples == 0 || self.attack_samples == 0 {
            return bad("n_samples and attack_samples must be at least 1".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        if self.task == Task::AttackSweep && self.sweep_epsilons.is_empty() {
            return bad("sweep_epsilons is empty".into());
        }
        if self.task == Task::AttackSweep && self.attack == AttackKind::None {
            return bad("attack-sweep needs an attack".into());
        }
        if let Some(spec) = self.attack_spec() {
            spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if matches!(self.task, Task::TrainClassifier | Task::TrainPurifier) {
            self.train_config()?
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn needs_purifier(&self) -> bool {
        match self.task {
            Task::TrainClassifier | Task::TrainPurifier => false,
            Task::TakeoverProbe => true,
            Task::Eval | Task::AttackSweep => self.defense == DefenseKind::Pipeline,
        }
    }

    pub fn classifier_spec(&self, input_shape: [usize; 3], classes: usize) -> ClassifierSpec {
        ClassifierSpec::desk(input_shape, self.classifier_widths, self.classifier_hidden, classes)
    }

    pub fn purifier_widths(&self) -> PurifierWidths {
        PurifierWidths {
            fcrepr: self.fcrepr,
            fjoint: self.fjoint,
            input_channels: self.input_encoder_channels,
            decoder_channels: self.decoder_channels,
        }
    }

    pub fn attack_spec(&self) -> Option<AttackSpec> {
        self.attack_spec_at(self.epsilon)
    }

    pub fn attack_spec_at(&self, epsilon: f64) -> Option<AttackSpec> {
        let family = match self.attack {
            AttackKind::None => return None,
            AttackKind::Fgsm => return Some(AttackSpec::fgsm(epsilon)),
            AttackKind::Pgd => AttackFamily::Pgd,
            AttackKind::EotPgd => AttackFamily::EotPgd,
        };
        Some(AttackSpec {
            family,
            epsilon,
            step_size: self.step_size,
            steps: self.steps,
            eot_iterations: if family == AttackFamily::EotPgd { self.eot_iterations } else { 1 },
            random_init: self.random_init,
            clip: (0.0, 1.0),
        })
    }

    /// Task defaults with every set key applied.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let mut c = match self.task {
            Task::TrainClassifier => TrainConfig::desk_classifier(),
            _ => TrainConfig::desk_purifier(),
        };
        c.seed = self.seed.unwrap_or(0);
        macro_rules! set {
            ($field:expr, $key:expr) => {
                if let Some(v) = $key {
                    $field = v;
                }
            };
        }
        set!(c.epochs, self.epochs);
        set!(c.batch_size, self.batch_size);
        if let Some(k) = self.optimizer {
            c.optimizer = OptimizerConfig {
                kind: k,
                ..c.optimizer
            };
        }
        let LrSchedule {
            initial,
            peak,
            final_lr,
            warmup,
            plateau,
            anneal,
        } = &mut c.lr;
        set!(*initial, self.lr_initial);
        set!(*peak, self.lr_peak);
        set!(*final_lr, self.lr_final);
        set!(*warmup, self.lr_warmup);
        set!(*plateau, self.lr_plateau);
        set!(*anneal, self.lr_anneal);
        let BetaSchedule {
            start,
            end,
            final_beta,
        } = &mut c.beta;
        set!(*start, self.beta_start);
        set!(*end, self.beta_end);
        set!(*final_beta, self.beta_final);
        set!(c.samples_per_input, self.samples_per_input);
        set!(c.adversarial_fraction, self.adversarial_fraction);
        set!(c.epsilon, self.train_epsilon);
        set!(c.pgd_step_size, self.train_step_size);
        set!(c.pgd_steps, self.train_steps);
        if let Some(vs) = &self.train_variants {
            c.variants = vs.iter().map(|s| parse_variant(s)).collect::<Result<_, _>>()?;
        }
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, ConfigError> {
    let bad = || ConfigError::Invalid(format!("training variant `{s}` is not family:scale"));
    let (fam, scale) = s.split_once(':').ok_or_else(bad)?;
    let family = match fam.trim() {
        "fgsm" => AttackFamily::Fgsm,
        "pgd" => AttackFamily::Pgd,
        _ => return Err(bad()),
    };
    let eps_scale = f64::from_str(scale.trim()).map_err(|_| bad())?;
    Ok(Variant { family, eps_scale })
}
