use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;
mod output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] greenkit::error::Error),
    #[error("{0}")]
    Usage(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "greenkit", version, about = "Learned Green's functions, neural preconditioners and hybrid solvers")]
pub struct Cli {
    /// Overrides the seed of the training config; recorded in every manifest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Every computation is currently single-threaded, so
    /// this is only recorded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a Green's function surrogate from a config file.
    Train {
        config: PathBuf,
        /// Overrides the epoch count of the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reproduce one of the solver tables (1, 2, 4 or 5).
    Table {
        id: String,
        /// Model file, or `exact` for the closed-form kernel.
        #[arg(long, default_value = "exact")]
        model: String,
        /// Comma-separated mesh widths (`2^-8` or decimals).
        #[arg(long)]
        h: Option<String>,
        /// Table 2 at h = 2^-16, H = 2^-10 instead of the reduced 2^-14, 2^-9.
        #[arg(long)]
        full: bool,
        /// Skip dense spectra above this many unknowns.
        #[arg(long)]
        eig_limit: Option<usize>,
    },
    /// Jacobi against hybrid iterations for several switching periods.
    Hybrid {
        #[arg(long, default_value = "exact")]
        model: String,
        /// Sectioned config with keys under `[hybrid]`; flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        problem: Option<String>,
        #[arg(long)]
        h: Option<String>,
        /// Comma-separated switching periods.
        #[arg(long)]
        periods: Option<String>,
        #[arg(long)]
        maxiter: Option<usize>,
        /// Error at which a run stops.
        #[arg(long)]
        tol: Option<f64>,
        /// Skip the mode decomposition.
        #[arg(long)]
        no_modes: bool,
    },
    /// Galerkin eigenpairs of a kernel and their deviation from the exact ones.
    Spectrum {
        #[arg(long, default_value = "exact")]
        model: String,
        #[arg(long)]
        problem: Option<String>,
        /// Number of eigenpairs (default 200 in 1D, 300 on the disc).
        #[arg(long)]
        count: Option<usize>,
        /// Mesh width (default 2^-10 quadratic in 1D, 0.045 linear on the disc).
        #[arg(long)]
        h: Option<String>,
    },
    /// Evaluate the kernel-quadrature solution of the problem's load.
    Solve {
        #[arg(long, default_value = "exact")]
        model: String,
        #[arg(long)]
        problem: Option<String>,
        #[arg(long, default_value = "2^-10")]
        h: String,
    },
    /// Classical or hybrid multigrid on a 1D hierarchy.
    Multigrid {
        /// Model file for the hybrid smoother; omit for the classical cycle.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        problem: Option<String>,
        /// Comma-separated mesh widths, finest first.
        #[arg(long, default_value = "2^-8,2^-4")]
        levels: String,
        #[arg(long, default_value_t = 30)]
        cycles: usize,
        #[arg(long, default_value_t = 1e-14)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
