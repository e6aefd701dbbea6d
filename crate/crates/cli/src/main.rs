//! `lipnet`: train, audit, and constrain small networks whose layer
//! operator norms certify a global Lipschitz bound.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure,
//! 3 file or format failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use commands::TrainFlags;

#[derive(Debug)]
pub enum CliError {
    /// Flag combinations or values clap cannot reject on its own.
    Usage(String),
    Lib(lipnet::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<lipnet::Error> for CliError {
    fn from(e: lipnet::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use lipnet::Error::*;
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e {
                Io { .. } | Format(_) | Version { .. } | Parse { .. } => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormFlag {
    L1,
    L2,
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PFlag {
    #[value(name = "1")]
    P1,
    #[value(name = "2")]
    P2,
    #[value(name = "inf")]
    Pinf,
    All,
}

#[derive(Parser)]
#[command(name = "lipnet", version, about = "Norm-constrained network trainer and auditor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic 1-d regression task to a CSV file.
    GenData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a dense relu network, optionally under a per-layer norm bound.
    Train {
        /// JSON experiment config (architecture, optimizer, epochs).
        #[arg(long)]
        config: PathBuf,
        /// Training CSV with x,y rows.
        #[arg(long)]
        data: PathBuf,
        /// Which operator norm to bound; required for a finite lambda.
        #[arg(long, value_enum)]
        norm: Option<NormFlag>,
        /// Per-layer bound; `inf` trains unconstrained.
        #[arg(long, default_value = "inf")]
        lambda: String,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_model: PathBuf,
        /// Optional per-epoch loss CSV.
        #[arg(long)]
        out_history: Option<PathBuf>,
    },
    /// Evaluate a saved model on a grid or on the x column of a CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Inclusive linspace `lo:hi:count`.
        #[arg(long, allow_hyphen_values = true, conflicts_with = "data")]
        grid: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify per-layer and whole-network Lipschitz upper bounds.
    Audit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        p: PFlag,
        /// Scale dropout layers by their retain probability.
        #[arg(long)]
        dropout_scaled: bool,
        /// Iteration cap for the spectral-norm power method.
        #[arg(long)]
        l2_iters: Option<usize>,
        /// Write the audit CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project a saved model onto the feasible set of a norm bound.
    Project {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        norm: NormFlag,
        #[arg(long)]
        lambda: String,
        /// Certify the l2 case by re-running converged audits after
        /// projection and rejecting the model if any layer still exceeds
        /// the bound.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe a model empirically and fail if a sampled slope ever exceeds
    /// the certified bound.
    Lipcheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "2")]
        p: PFlag,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        /// Sampling box `lo:hi` for input coordinates.
        #[arg(long = "box", allow_hyphen_values = true, default_value = "-5:5")]
        box_domain: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { n, lo, hi, seed, out } => commands::gen_data(n, lo, hi, seed, &out),
        Command::Train {
            config,
            data,
            norm,
            lambda,
            seed,
            out_model,
            out_history,
        } => commands::train(&TrainFlags {
            config,
            data,
            norm,
            lambda,
            seed,
            out_model,
            out_history,
        }),
        Command::Predict { model, grid, data, out } => {
            commands::predict(&model, grid.as_deref(), data.as_deref(), &out)
        }
        Command::Audit {
            model,
            p,
            dropout_scaled,
            l2_iters,
            out,
        } => commands::audit(&model, p, dropout_scaled, l2_iters, out.as_deref()),
        Command::Project {
            model,
            norm,
            lambda,
            strict,
            out,
        } => commands::project(&model, norm, &lambda, strict, &out),
        Command::Lipcheck {
            model,
            p,
            pairs,
            box_domain,
            seed,
        } => commands::lipcheck(&model, p, pairs, &box_domain, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse errors print to stderr and count as usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
