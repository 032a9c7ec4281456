use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpnas_cli::{cmd_analyze, cmd_retrain, cmd_search, cmd_trajectory, Overrides};
use mpnas_core::search::Strategy;

#[derive(Parser)]
#[command(name = "mpnas", version, about = "Architecture search over stacked message-passing networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Re,
    Rs,
}

#[derive(Args)]
struct Common {
    /// Search seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel evaluations.
    #[arg(long)]
    workers: Option<usize>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    budget_s: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            budget_s: self.budget_s,
            strategy: self.strategy.map(|s| match s {
                StrategyArg::Re => Strategy::Re,
                StrategyArg::Rs => Strategy::Rs,
            }),
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write the evaluation log and reports.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Retrain the best architecture of a log from scratch.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Operation importance from a log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        /// Supplies the search space, tree count and forest seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smoothed reward and high-performer counts from a log.
    Trajectory {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[arg(long, default_value_t = -0.35, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Search { config, common } => cmd_search(config, &common.overrides()),
        Command::Retrain { config, log, common } => cmd_retrain(config, log, &common.overrides()),
        Command::Analyze { log, config, out } => cmd_analyze(log, config.as_deref(), out.as_deref()),
        Command::Trajectory { log, window, threshold, out } => cmd_trajectory(log, *window, *threshold, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
