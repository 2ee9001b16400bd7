//! Command-line front end: configuration loading, subcommand dispatch and
//! CSV/JSON/SVG report emission.

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

/// JSON summaries carry this in `schema_version`.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, configuration or input files: exit code 1.
    Config,
    /// The simulation itself failed: exit code 2.
    Simulation,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(path: &Path, message: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: format!("{}: {message}", path.display()),
        }
    }

    /// Wraps a library error, classifying it by exit code.
    pub fn from_core(path: &Path, err: servesim::Error) -> Self {
        use servesim::Error as E;
        let kind = match err {
            E::Livelock(_) | E::Invariant(_) | E::InvalidBatch => ErrorKind::Simulation,
            _ => ErrorKind::Config,
        };
        Self {
            kind,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Simulation => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Capacity planner and deterministic simulator for LM serving.
#[derive(Debug, Parser)]
#[command(name = "servesim", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Maximum batch sizes per model, TP degree and replica count.
    Plan {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Simulate one serving instance over the configured workload.
    Simulate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Sweep batch caps (and TP degrees); extract the Pareto frontier.
    Sweep {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Co-located replicas R = 1..r_max on one device.
    Replicate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Pareto frontier of a previously written sweep CSV.
    Pareto {
        /// sweep.csv from a `sweep` run.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Frontier CSV to write [default: frontier.csv next to the input].
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
