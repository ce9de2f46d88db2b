//! `qdist`: distributional data analysis from the command line. Subject
//! samples come in as long-format CSV, get represented as quantile
//! functions on a shared grid, and flow into L-moment summaries,
//! scalar-on-distribution regressions, multi-block decomposition,
//! cross-validated model comparison, and a scenario simulator. Every run
//! writes its artifacts next to a `run_manifest.json` that pins the full
//! effective configuration, so any run can be replayed byte for byte.

mod commands;
mod config;
mod summaries;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// A failed run: either the inputs were unusable (exit 1) or the numerics
/// gave up (exit 2).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(qdist::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_numerical() => 2,
            Failure::Core(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<qdist::Error> for Failure {
    fn from(e: qdist::Error) -> Self {
        Failure::Core(e)
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "qdist",
    version,
    about = "Distributional data analysis: quantile functions, L-moments, \
             scalar-on-distribution regression, and multi-block decomposition"
)]
struct Cli {
    /// JSON configuration file with flat dotted keys; flags override it.
    /// A run_manifest.json from an earlier run also works.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory the artifacts and run manifest are written to
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed for every randomized step
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct InputArgs {
    /// Long-format observations CSV: subject_id,feature_id,value
    #[arg(long, value_name = "FILE")]
    observations: Option<PathBuf>,

    /// Subjects CSV: subject_id,outcome,<covariates...>
    #[arg(long, value_name = "FILE")]
    subjects: Option<PathBuf>,

    /// Optional feature-to-domain mapping CSV: feature_id,domain
    #[arg(long, value_name = "FILE")]
    domains: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Distributional feature the model uses (defaults to the only one)
    #[arg(long)]
    feature: Option<String>,

    /// Comma-separated covariate columns to adjust for (default: all)
    #[arg(long, value_name = "NAMES")]
    covariates: Option<String>,

    /// Outcome family: auto, gaussian, or binomial
    #[arg(long)]
    family: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate per-subject quantile functions on the shared grid
    Quantiles {
        #[command(flatten)]
        input: InputArgs,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
    },

    /// Per-subject L-moment tables
    Lmoments {
        #[command(flatten)]
        input: InputArgs,
        /// Number of L-moments per subject and feature
        #[arg(long, value_name = "K")]
        order: Option<usize>,
        /// Estimator route: sample (order statistics) or projection (grid)
        #[arg(long)]
        method: Option<String>,
        /// Grid levels for the projection route
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
    },

    /// Linear functional-coefficient regression on quantile functions
    FitSoqfr {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
        /// Coefficient-curve basis: spline or legendre
        #[arg(long)]
        basis: Option<String>,
        /// Basis dimension of the coefficient curve
        #[arg(long)]
        basis_size: Option<usize>,
        /// Fixed smoothing parameter (skips the GCV grid search)
        #[arg(long)]
        lambda: Option<f64>,
        /// Lower end of the GCV smoothing grid
        #[arg(long)]
        lambda_lo: Option<f64>,
        /// Upper end of the GCV smoothing grid
        #[arg(long)]
        lambda_hi: Option<f64>,
        /// Number of GCV grid points
        #[arg(long)]
        lambda_count: Option<usize>,
    },

    /// Bivariate-surface regression on quantile functions
    FitFgam {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
        /// Marginal basis dimension along the value axis
        #[arg(long)]
        basis_q_size: Option<usize>,
        /// Marginal basis dimension along the probability axis
        #[arg(long)]
        basis_p_size: Option<usize>,
        /// Lower end of the GCV smoothing grid (both axes)
        #[arg(long)]
        lambda_lo: Option<f64>,
        /// Upper end of the GCV smoothing grid (both axes)
        #[arg(long)]
        lambda_hi: Option<f64>,
        /// Grid points per smoothing axis
        #[arg(long)]
        lambda_count: Option<usize>,
        /// Comma-separated probability levels for surface slices
        #[arg(long)]
        slices: Option<String>,
    },

    /// Regression on the leading L-moments with an induced coefficient curve
    FitSoqfrL {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
        /// Number of L-moments entering the model
        #[arg(long, value_name = "K")]
        order: Option<usize>,
    },

    /// Additive model with one smooth per L-moment
    FitGamL {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
        /// Number of L-moments entering the model
        #[arg(long, value_name = "K")]
        order: Option<usize>,
        /// Basis dimension of each smooth
        #[arg(long)]
        basis_size: Option<usize>,
    },

    /// Histogram-composition regression with a smooth bin-effect curve
    FitHist {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of equal-width bins
        #[arg(long)]
        bins: Option<usize>,
        /// Bin range: `auto` (observed range) or `lo:hi`
        #[arg(long)]
        bin_range: Option<String>,
        /// Basis dimension of the bin-effect curve (default: one per bin)
        #[arg(long)]
        basis_size: Option<usize>,
        /// Fixed smoothing parameter (skips the GCV grid search)
        #[arg(long)]
        lambda: Option<f64>,
    },

    /// Joint and individual variation across feature domains
    Jive {
        #[command(flatten)]
        input: InputArgs,
        /// L-moments per feature used to build the blocks
        #[arg(long, value_name = "K")]
        order: Option<usize>,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
        /// Fixed joint rank (with --individual-ranks); omit to select by
        /// permutation
        #[arg(long)]
        joint_rank: Option<usize>,
        /// Comma-separated per-domain individual ranks
        #[arg(long)]
        individual_ranks: Option<String>,
        /// Permutation replicates for rank selection
        #[arg(long)]
        permutations: Option<usize>,
        /// Per-test level for rank selection
        #[arg(long)]
        alpha: Option<f64>,
    },

    /// Repeated k-fold cross-validated model comparison
    Cv {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of midpoint grid levels
        #[arg(long, value_name = "M")]
        grid_points: Option<usize>,
        /// Folds per repeat
        #[arg(long)]
        k: Option<usize>,
        /// Number of repeats
        #[arg(long, value_name = "B")]
        repeats: Option<usize>,
        /// Comma-separated models to compare
        /// (soqfr, soqfr-l, fgam, gam-l, hist)
        #[arg(long)]
        models: Option<String>,
    },

    /// Draw a synthetic dataset with a ground-truth sidecar
    Simulate {
        /// Scenario description (JSON); omit for the built-in default
        #[arg(long, value_name = "FILE")]
        scenario: Option<PathBuf>,
        /// Override the scenario's subject count
        #[arg(long, value_name = "N")]
        n_subjects: Option<usize>,
    },
}

/// `QDIST_THREADS` caps the global worker pool before any parallel work
/// starts.
fn init_threads() -> CliResult<()> {
    let Some(raw) = std::env::var_os("QDIST_THREADS") else {
        return Ok(());
    };
    let text = raw.to_string_lossy();
    let n: usize = text
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| usage(format!("QDIST_THREADS must be a positive integer, got `{text}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("could not configure the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(f) = init_threads() {
        eprintln!("error: {f}");
        return ExitCode::from(f.exit_code());
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
