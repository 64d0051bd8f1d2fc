mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunArgs;

/// Sparse keypoint matching between two shapes with certified optimality.
#[derive(Debug, Parser)]
#[command(name = "sparse-match", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Branch-and-bound solve; exit 0 optimal, 2 budget hit, 3 infeasible.
    Match(RunArgs),
    /// Exhaustive enumeration for small instances.
    Oracle(RunArgs),
    /// Per-vertex WKS and orientation feature of each given shape.
    Features(RunArgs),
    /// Continuous solve for a fixed correspondence.
    Reconstruct {
        #[command(flatten)]
        run: RunArgs,
        /// Target keypoint per source keypoint; identity when omitted.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PriorArg::Plbo)]
        prior: PriorArg,
    },
    /// Geodesic errors and PCK of a prediction against ground truth.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// A solution JSON or an assignment file.
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Solve with the target rescaled by each factor.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = sparse_match::eval::PAPER_SCALE_FACTORS)]
        factors: Vec<f64>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PriorArg {
    Lbo,
    Plbo,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SIGMA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Match(run) => commands::cmd_match(&run),
        Command::Oracle(run) => commands::cmd_oracle(&run),
        Command::Features(run) => commands::cmd_features(&run),
        Command::Reconstruct { run, ground_truth, prior } => {
            let prior = match prior {
                PriorArg::Lbo => sparse_match::eval::Prior::Lbo,
                PriorArg::Plbo => sparse_match::eval::Prior::Plbo,
            };
            commands::cmd_reconstruct(&run, ground_truth.as_deref(), prior)
        }
        Command::Eval { run, prediction, ground_truth } => commands::cmd_eval(&run, &prediction, &ground_truth),
        Command::Sweep { run, factors, ground_truth } => commands::cmd_sweep(&run, &factors, ground_truth.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
