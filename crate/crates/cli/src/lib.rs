//! Experiment harness for the federated class-incremental simulator.
//!
//! Every subcommand writes one run directory `OUT/<command>-<config hash>/`
//! holding `report.json`, `table.csv`, `traces.jsonl` and `manifest.json`.
//! Re-running a command with the same config and seeds rewrites the first
//! three files with identical bytes.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fcil_core::orchestrator::{
    ablation_rows, baseline_rows, noniid_rows, run_suite, SuiteCell, NONIID_ALPHAS,
};
use fcil_core::ExperimentConfig;

pub use output::{RunDir, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Output(_) => 1,
        }
    }
}

impl From<fcil_core::Error> for CliError {
    fn from(e: fcil_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fcil",
    version,
    about = "Federated class-incremental learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment with the configured method flags.
    Run(CommonArgs),
    /// FedAvg, FedAvg+KD, FedAvg+Replay, MLFCIL and the joint oracle.
    Compare(CommonArgs),
    /// The eleven-row mechanism ablation grid.
    Ablate(CommonArgs),
    /// Final accuracy of MLFCIL and FedAvg across Dirichlet concentrations.
    SweepNoniid(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Override a config key, e.g. `--set rounds=3` or `--set methods.gp=false`.
    #[arg(long = "set", value_name = "KEY=VAL")]
    pub overrides: Vec<String>,
    /// Seed list such as `0,1,2` or `0..5`.
    #[arg(long)]
    pub seeds: Option<String>,
}

impl CommonArgs {
    pub fn new(config: Option<&Path>, out: &Path) -> Self {
        Self {
            config: config.map(Path::to_path_buf),
            out: out.to_path_buf(),
            overrides: Vec::new(),
            seeds: None,
        }
    }

    pub fn with_set(mut self, assignment: &str) -> Self {
        self.overrides.push(assignment.to_string());
        self
    }

    pub fn with_seeds(mut self, seeds: &str) -> Self {
        self.seeds = Some(seeds.to_string());
        self
    }

    fn load(&self) -> Result<ExperimentConfig, CliError> {
        config::load_config(
            self.config.as_deref(),
            &self.overrides,
            self.seeds.as_deref(),
        )
    }
}

/// Where a finished command left its files.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub cells: Vec<SuiteCell>,
}

fn execute(
    name: &str,
    args: &CommonArgs,
    rows: impl FnOnce(&ExperimentConfig) -> Vec<(String, ExperimentConfig)>,
    table: output::TableKind,
) -> Result<Outcome, CliError> {
    let mut cfg = args.load()?;
    // a single run uses `seed` unless a seed list is passed explicitly
    if name == "run" && args.seeds.is_none() {
        cfg.seeds = vec![cfg.seed];
    }
    let started = output::now_unix();
    let rows = rows(&cfg);
    let cells = run_suite(&rows, &cfg.seeds)?;
    let dir = args.out.join(format!("{name}-{}", cfg.hash()));
    let run_dir = RunDir::create(&dir)?;
    run_dir.write_report(name, &cfg, &rows, &cells)?;
    run_dir.write_table(table, &cfg, &rows, &cells)?;
    run_dir.write_traces(&cells)?;
    run_dir.write_manifest(name, &cfg, args.config.as_deref(), started)?;
    Ok(Outcome { dir, cells })
}

/// Runs `run_experiment` with the configured flags, for `seed` or for every
/// seed given with `--seeds`.
pub fn cmd_run(args: &CommonArgs) -> Result<Outcome, CliError> {
    execute(
        "run",
        args,
        |cfg| vec![(cfg.methods.label(), cfg.clone())],
        output::TableKind::Methods,
    )
}

pub fn cmd_compare(args: &CommonArgs) -> Result<Outcome, CliError> {
    execute("compare", args, baseline_rows, output::TableKind::Methods)
}

pub fn cmd_ablate(args: &CommonArgs) -> Result<Outcome, CliError> {
    execute("ablate", args, ablation_rows, output::TableKind::Ablation)
}

pub fn cmd_sweep_noniid(args: &CommonArgs) -> Result<Outcome, CliError> {
    execute(
        "sweep-noniid",
        args,
        noniid_rows,
        output::TableKind::Sweep(NONIID_ALPHAS.to_vec()),
    )
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SweepNoniid(a) => cmd_sweep_noniid(a),
    };
    match result {
        Ok(outcome) => {
            match std::fs::read_to_string(outcome.dir.join("table.csv")) {
                Ok(table) => print!("{table}"),
                Err(e) => eprintln!("warning: cannot re-read table: {e}"),
            }
            println!("results in {}", outcome.dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
