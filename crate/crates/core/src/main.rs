use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use carso::cli;
use carso::config::{parse_override, ConfigError, Preset, RunConfig, Task};

#[derive(Parser)]
#[command(name = "carso", version, about = "Adversarial purification conditioned on classifier internals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train the classifier.
    TrainClassifier(Common),
    /// Train the purifier against a frozen classifier.
    TrainPurifier(Common),
    /// Clean and robust accuracy of the classifier or the full pipeline.
    Eval(Common),
    /// Robust accuracy over a list of perturbation budgets.
    AttackSweep(Common),
    /// Push one reconstruction logit to an extreme and watch each aggregation.
    TakeoverProbe(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding the IDX files.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overwrite artifacts already present in the output directory.
    #[arg(long)]
    force: bool,
    /// Override any configuration key, e.g. `--set epsilon=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve(task: Task, c: &Common) -> Result<RunConfig, ConfigError> {
    let mut overrides = c.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = c.seed {
        overrides.push(("seed".into(), toml::Value::Integer(s as i64)));
    }
    for (key, path) in [("out", &c.out), ("dataset", &c.dataset)] {
        if let Some(p) = path {
            overrides.push((key.into(), toml::Value::String(p.display().to_string())));
        }
    }
    RunConfig::resolve(task, c.preset, c.config.as_deref(), overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    let (task, common) = match &args.command {
        Command::TrainClassifier(c) => (Task::TrainClassifier, c),
        Command::TrainPurifier(c) => (Task::TrainPurifier, c),
        Command::Eval(c) => (Task::Eval, c),
        Command::AttackSweep(c) => (Task::AttackSweep, c),
        Command::TakeoverProbe(c) => (Task::TakeoverProbe, c),
    };
    let result = resolve(task, common)
        .map_err(cli::CliError::from)
        .and_then(|cfg| cli::run(&cfg, common.force));
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
