//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ProblemKind, Settings, SparsifierKind};
use crate::error::{Error, Result};
use crate::harness::{
    run_with_objective, sparsity_sweep, ExperimentConfig, Objective, RoundTrace, TraceLevel,
};
use crate::io;
use crate::oracle::ranking_agreement;
use crate::problems::generate;
use crate::vector::DenseVector;

#[derive(Debug, Parser)]
#[command(
    name = "regtopk",
    version,
    about = "Top-k / RegTop-k sparsified distributed SGD simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic regression datasets as per-worker CSV files.
    GenData(CommonArgs),
    /// Run one experiment and write its trace.
    Run(CommonArgs),
    /// Mean final optimality gap over a grid of sparsity factors.
    Sweep(CommonArgs),
    /// Two-worker logistic example: loss per round for none, topk and regtopk.
    Toy(CommonArgs),
    /// Monte Carlo posterior report for a small instance.
    Oracle(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file (`key = value` lines, or a config.json from an earlier run).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output root; artifacts go to OUT/<run-id>/.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Shorthand for the `seed=` override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Contents of `config.json`.
#[derive(Debug, Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    trace_format_version: u32,
    seed: u64,
    run_id: &'a str,
    config: &'a Settings,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Run(_) => "run",
            Command::Sweep(_) => "sweep",
            Command::Toy(_) => "toy",
            Command::Oracle(_) => "oracle",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::Run(a)
            | Command::Sweep(a)
            | Command::Toy(a)
            | Command::Oracle(a) => a,
        }
    }
}

/// Resolves defaults, then the config file, then overrides.
pub fn resolve_settings(command: &Command) -> Result<Settings> {
    let args = command.args();
    let mut settings = match command {
        Command::Toy(_) => Settings::defaults_for_toy(),
        _ => Settings::default(),
    };
    if let Some(path) = &args.config {
        settings.apply_file(path)?;
    }
    for o in &args.overrides {
        settings.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        settings.seed = seed;
    }
    Ok(settings)
}

fn prepare_output(command: &Command, settings: &Settings) -> Result<PathBuf> {
    let run_id = settings.run_id()?;
    let dir = command.args().out.join(&run_id);
    std::fs::create_dir_all(&dir)?;
    let meta = Metadata {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        trace_format_version: io::TRACE_FORMAT_VERSION,
        seed: settings.seed,
        run_id: &run_id,
        config: settings,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(dir.join("config.json"), text)?;
    Ok(dir)
}

fn write_traces(dir: &Path, traces: &[RoundTrace], level: TraceLevel) -> Result<()> {
    io::write_trace_csv(&dir.join("trace.csv"), traces)?;
    if level == TraceLevel::Full {
        io::write_trace_jsonl(&dir.join("full_trace.jsonl"), traces)?;
    }
    Ok(())
}

fn objective_for(settings: &Settings, cfg: &ExperimentConfig) -> Result<Objective> {
    match (&settings.data_dir, settings.problem) {
        (Some(dir), ProblemKind::LinearRegression) => {
            let datasets = io::read_datasets(dir)?;
            if datasets.len() != settings.workers || datasets[0].dim() != settings.dim {
                return Err(Error::Config(format!(
                    "data in {} has {} workers of dimension {}, config says workers = {}, dim = {}",
                    dir.display(),
                    datasets.len(),
                    datasets[0].dim(),
                    settings.workers,
                    settings.dim
                )));
            }
            Objective::from_datasets(&datasets, &cfg.resolved_weights()?)
        }
        (Some(_), ProblemKind::LogisticToy) => Err(Error::Config(
            "data_dir only applies to problem = linear_regression".into(),
        )),
        (None, _) => Objective::build(cfg),
    }
}

/// Runs a subcommand and returns the directory holding its artifacts.
pub fn execute(command: &Command) -> Result<PathBuf> {
    let settings = resolve_settings(command)?;
    match command {
        Command::GenData(_) => {
            if settings.problem != ProblemKind::LinearRegression {
                return Err(Error::Config(
                    "gen-data needs problem = linear_regression".into(),
                ));
            }
            let gen = settings.gen_config();
            gen.validate()?;
            let data = generate(&gen)?;
            let dir = prepare_output(command, &settings)?;
            io::write_datasets(&dir.join("data"), &data.datasets)?;
            Ok(dir)
        }
        Command::Run(_) => {
            let cfg = settings.experiment()?;
            let objective = objective_for(&settings, &cfg)?;
            let dir = prepare_output(command, &settings)?;
            match run_with_objective(&cfg, &objective) {
                Ok(traces) => {
                    write_traces(&dir, &traces, cfg.trace_level)?;
                    Ok(dir)
                }
                Err(Error::Diverged { round, loss, trace }) => {
                    write_traces(&dir, &trace, cfg.trace_level)?;
                    Err(Error::Diverged {
                        round,
                        loss,
                        trace: Vec::new(),
                    })
                }
                Err(e) => Err(e),
            }
        }
        Command::Sweep(_) => {
            if settings.data_dir.is_some() {
                return Err(Error::Config(
                    "sweep draws fresh data per repeat and cannot use data_dir".into(),
                ));
            }
            let base = settings.experiment()?;
            let tables = settings
                .sweep_sparsifiers
                .iter()
                .map(|&kind| {
                    let cfg = ExperimentConfig {
                        sparsifier: settings.sparsifier_of(kind),
                        ..base.clone()
                    };
                    let rows = sparsity_sweep(&cfg, &settings.sweep_s, settings.sweep_repeats)?;
                    Ok((name_of(kind), rows))
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = prepare_output(command, &settings)?;
            io::write_sweep_csv(&dir.join("sweep.csv"), &tables)?;
            Ok(dir)
        }
        Command::Toy(_) => {
            if settings.problem != ProblemKind::LogisticToy {
                return Err(Error::Config("toy needs problem = logistic_toy".into()));
            }
            let base = settings.experiment()?;
            let objective = Objective::build(&base)?;
            let runs = [
                SparsifierKind::None,
                SparsifierKind::Topk,
                SparsifierKind::Regtopk,
            ]
            .into_iter()
            .map(|kind| {
                let cfg = ExperimentConfig {
                    sparsifier: settings.sparsifier_of(kind),
                    trace_level: TraceLevel::GapOnly,
                    ..base.clone()
                };
                Ok((name_of(kind), run_with_objective(&cfg, &objective)?))
            })
            .collect::<Result<Vec<_>>>()?;
            let dir = prepare_output(command, &settings)?;
            io::write_loss_table(&dir.join("toy.csv"), &runs)?;
            Ok(dir)
        }
        Command::Oracle(_) => {
            let a_local = DenseVector::new(settings.oracle_a_local.clone())?;
            let report = ranking_agreement(
                &a_local,
                &settings.known_z()?,
                &settings.innovation_model(),
                &settings.reg_params(),
                settings.oracle_omega,
                settings.oracle_k,
                settings.oracle_samples,
                settings.seed,
            )?;
            let dir = prepare_output(command, &settings)?;
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            std::fs::write(dir.join("report.json"), text)?;
            Ok(dir)
        }
    }
}

fn name_of(kind: SparsifierKind) -> &'static str {
    match kind {
        SparsifierKind::None => "none",
        SparsifierKind::Topk => "topk",
        SparsifierKind::Regtopk => "regtopk",
    }
}

/// Short machine-readable category of an error.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parameter(_) => "parameter",
        Error::Input(_) => "input",
        Error::State(_) => "state",
        Error::Numerical(_) => "numerical",
        Error::Diverged { .. } => "diverged",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Exit status: 2 for bad configuration or input, 3 for divergence, 1 for
/// anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_) | Error::Input(_) | Error::Config(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

/// The one-line JSON error printed on stderr.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}
