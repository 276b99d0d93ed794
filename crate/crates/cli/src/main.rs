mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dlcm", version, about = "Dynamic latent class route-choice model")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of the command's random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a panel from the data-generating process.
    Simulate,
    /// Apply the screening rules and report what survives.
    Screen {
        #[arg(long)]
        panel: PathBuf,
    },
    /// Fit the model by EM, optionally over a memory-decay grid.
    Estimate {
        #[arg(long)]
        panel: PathBuf,
        /// Memory-decay grid `lo:hi:step`.
        #[arg(long)]
        mu_grid: Option<String>,
        /// Number of past experiences per route in the expectations.
        #[arg(long)]
        memory: Option<usize>,
    },
    /// Most likely class sequences and class shares at given parameters.
    Decode {
        #[arg(long)]
        panel: PathBuf,
        /// Estimation result or truth document.
        #[arg(long)]
        result: PathBuf,
        /// True classes of a simulated panel, for an accuracy report.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a benchmark model.
    Baseline {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelKind::Mnl)]
        model: ModelKind,
        #[arg(long)]
        memory: Option<usize>,
    },
    /// Crowding multipliers from an estimation result.
    Report {
        #[arg(long)]
        result: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Dlcm,
    Mnl,
    Lcmnl,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<dlcm::Error> for CliError {
    fn from(e: dlcm::Error) -> Self {
        use dlcm::Error as E;
        let code = match &e {
            E::Config(_) => 2,
            E::Numeric(_) | E::Optimizer(_) | E::SingularHessian { .. } => 4,
            _ => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
