//! `conemv`: solve, simulate and verify equilibrium mean-variance strategies.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_SUSPECT: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] conemv_core::Error),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_FAILED,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "conemv", version, about = "Equilibrium mean-variance strategies under cone constraints")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimPolicy {
    Equilibrium,
    Precommit,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyPolicy {
    Equilibrium,
    Zero,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form equilibrium and precommitted strategies (deterministic θ).
    Solve,
    /// As `solve`, checking J_eq > J_pre and optionally evaluating a feedback file.
    Compare {
        /// CSV policy file with columns time, c_1..c_l.
        #[arg(long)]
        feedback: Option<PathBuf>,
    },
    /// Monte Carlo estimates of E[X_T], Var(X_T) and J under a policy.
    Simulate {
        #[arg(long, value_enum, default_value = "equilibrium")]
        policy: SimPolicy,
        /// Policy file for `--policy file`: columns time, c_1..c_l[, g_1..g_l].
        #[arg(long)]
        policy_file: Option<PathBuf>,
        /// Also write terminal wealth of every path.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Spike-variation equilibrium test.
    Verify {
        /// Perturbation times (grid nodes).
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<f64>>,
        /// Perturbations: zero, c, 2c, c+e1, or a vector such as "0.5;1".
        #[arg(long)]
        w: Option<Vec<String>>,
        /// Spike widths (multiples of the grid step).
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "equilibrium")]
        policy: VerifyPolicy,
    },
    /// Regression Monte Carlo solution of the quadratic BSDE (factor-driven θ).
    Bsde {
        /// Write the first N factor paths to factor_paths.csv.
        #[arg(long, default_value_t = 0)]
        factor_paths: usize,
    },
}

fn run(cli: Cli) -> Result<u8, CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let path = cli.global.config.ok_or_else(|| CliError::Usage("missing --config PATH".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.global.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let out = output::Output::create(&cfg)?;
    match cli.command {
        Command::Solve => commands::solve(&cfg, &out, false, None),
        Command::Compare { feedback } => commands::solve(&cfg, &out, true, feedback.as_deref()),
        Command::Simulate { policy, policy_file, dump_paths } => commands::simulate(&cfg, &out, policy, policy_file.as_deref(), dump_paths),
        Command::Verify { t, w, eps, policy } => commands::verify(&cfg, &out, t, w, eps, policy),
        Command::Bsde { factor_paths } => commands::bsde(&cfg, &out, factor_paths),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
