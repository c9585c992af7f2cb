//! Command-line harness: reads a flat key=value config, runs one experiment
//! and writes a CSV table headed by a `#` manifest row.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use clap::Parser;

pub use config::{ExperimentSpec, Kind, Resolved};
pub use experiments::Check;
pub use output::{Cell, Manifest, Table};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gla_icl::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 for configuration problems, 2 for numerical failures, 3 for a failed `--check`.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::CheckFailed(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gla-icl", about = "Gated linear attention in-context learning experiments")]
pub struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    pub kind: Kind,
    /// key=value config file; `#` starts a comment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set task.gamma=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also verify the result against theory; exit 3 on mismatch.
    #[arg(long)]
    pub check: bool,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct RunOutput {
    /// Manifest line, header and rows.
    pub csv: String,
    pub check: Option<Check>,
    pub out_path: Option<PathBuf>,
}

pub fn build_spec(cli: &Cli) -> Result<ExperimentSpec, CliError> {
    let text = match &cli.config {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let resolved = Resolved::new(text.as_deref(), &cli.sets, cli.seed, cli.out.as_deref())?;
    ExperimentSpec::from_resolved(cli.kind, resolved)
}

/// Runs the experiment and writes the CSV to `--out` if given.
pub fn execute(cli: &Cli) -> Result<RunOutput, CliError> {
    let spec = build_spec(cli)?;
    let (table, check) = experiments::run(&spec, cli.check)?;
    let manifest = Manifest {
        kind: spec.kind.name(),
        echo: &spec.resolved.echo(),
        seed: spec.seed,
        overrides: &spec.resolved.overrides,
    };
    let csv = format!("{}{}", manifest.line(), table.body());
    if let Some(path) = &spec.out_path {
        std::fs::write(path, &csv)?;
    }
    if let Some(c) = &check {
        if !c.passed {
            return Err(CliError::CheckFailed(c.message.clone()));
        }
    }
    Ok(RunOutput {
        csv,
        check,
        out_path: spec.out_path,
    })
}
