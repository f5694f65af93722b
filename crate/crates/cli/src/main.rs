//! `exss`: runs continual-learning experiments and writes CSV/SVG reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exssnet::Mode;

use crate::commands::Axis;
use crate::config::ConfigFile;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<exssnet::Error> for CliError {
    fn from(e: exssnet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "exss", version, about = "Exclusive supermask subnetwork training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set mask_density=0.05` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, value_parser = ["on", "off"])]
    kkt: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ConfigFile, CliError> {
        let mut all = self.overrides.clone();
        if let Some(s) = self.seed {
            all.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            all.push(format!("out={}", toml::Value::String(o.display().to_string())));
        }
        if let Some(m) = self.mode {
            all.push(format!("mode={m}"));
        }
        if let Some(k) = &self.kkt {
            all.push(format!("kkt={}", k == "on"));
        }
        ConfigFile::load(self.config.as_deref(), &all)
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn the task sequence once and write metrics, summary and checkpoint.
    Run(Common),
    /// Repeat runs over an axis for every mode and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Describe a checkpoint: overlaps, free capacity, storage accounting.
    Report {
        checkpoint: PathBuf,
        /// Also write report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured task sequence.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => commands::run(&c.load()?),
        Command::Sweep { common, axis, values } => {
            let modes = match common.mode {
                Some(m) => vec![m],
                None => Mode::ALL.to_vec(),
            };
            commands::sweep(&common.load()?, axis, &values, &modes)
        }
        Command::Report { checkpoint, out } => {
            print!("{}", commands::report(&checkpoint, out.as_deref())?);
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            println!("task,accuracy");
            for r in commands::eval(&common.load()?, &checkpoint)? {
                println!("{},{}", r.task, r.accuracy);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
