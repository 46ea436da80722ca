//! `nqnet`: data generation, quantile-network fits, replication tables,
//! fitted distributional value iteration, and static plots.
//!
//! Every run reads an optional flat `key = value` config file; flags
//! override file values, which override built-in defaults. The effective
//! configuration is echoed into the output directory, and all output files
//! are byte-deterministic functions of (configuration, seeds).

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Failures grouped by exit code: 1 config, 2 runtime, 3 I/O.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "run failed: {msg}"),
            CliError::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl From<nqnet_core::Error> for CliError {
    fn from(e: nqnet_core::Error) -> Self {
        match &e {
            nqnet_core::Error::InvalidArgument(_) | nqnet_core::Error::ShapeMismatch(_) => {
                CliError::Config(e.to_string())
            }
            nqnet_core::Error::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nqnet",
    version,
    about = "Non-crossing quantile networks: simulation fits, replication tables, \
             distributional value iteration, and plots.",
    after_help = "Configuration precedence: built-in defaults, then the --config file \
                  (flat `key = value` lines, `#` comments), then flags. Unknown config \
                  keys are rejected. Output root: --out-dir, else the config `out_dir`, \
                  else $NQNET_OUT_DIR/<command>, else out/<command>."
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; every stream in the run derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for the replicate fan-out (other commands ignore it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a simulation dataset to CSV with a metadata sidecar.
    GenData(GenDataArgs),
    /// Fit one quantile network and evaluate it against the true quantiles.
    Train(TrainArgs),
    /// Run a (models x methods x reps) sweep and write the summary table.
    Replicate(ReplicateArgs),
    /// Fitted distributional value iteration on the toy MDP.
    Drl(DrlArgs),
    /// Render a CSV as a static SVG chart.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Simulation model id.
    #[arg(long)]
    model: Option<String>,
    /// Number of rows to draw.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Simulation model id.
    #[arg(long)]
    model: Option<String>,
    /// Head architecture: nq, nq_relu, dqr, dqr_star, or ncqrdqn.
    #[arg(long)]
    method: Option<String>,
    /// Training rows.
    #[arg(long)]
    n: Option<usize>,
    /// Number of uniform quantile levels k/(K+1).
    #[arg(long)]
    k: Option<usize>,
    /// Explicit comma-separated quantile levels (alternative to --k).
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated hidden layer widths; empty picks the protocol default.
    #[arg(long)]
    hidden: Option<String>,
    /// Loss: check or qhuber.
    #[arg(long)]
    loss: Option<String>,
    /// Huber zone width for --loss qhuber.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Held-out points for the ground-truth evaluation.
    #[arg(long)]
    test_size: Option<usize>,
    /// Resolution of the predicted-curve export (univariate models; 0 skips).
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
pub struct ReplicateArgs {
    /// Comma-separated simulation model ids.
    #[arg(long)]
    models: Option<String>,
    /// Comma-separated head ids.
    #[arg(long)]
    methods: Option<String>,
    /// Training rows per run.
    #[arg(long)]
    n: Option<usize>,
    /// Replications per (model, method) cell.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Args)]
pub struct DrlArgs {
    /// Discount factor.
    #[arg(long)]
    gamma: Option<f64>,
    /// Student-t degrees of freedom for the reward noise.
    #[arg(long)]
    reward_df: Option<f64>,
    /// Outer fitted iterations (a fresh batch is collected for each).
    #[arg(long)]
    iters: Option<usize>,
    /// Transitions collected per iteration.
    #[arg(long)]
    n: Option<usize>,
    /// Quantile levels per action.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hidden: Option<String>,
    /// Exploration rate of the behavior policy.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Adam epochs per fitted iteration.
    #[arg(long)]
    fit_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    loss: Option<String>,
    /// Continue from the previous parameters instead of refitting fresh.
    #[arg(long)]
    warm_start: bool,
    /// Resolution of the exported policy grid.
    #[arg(long)]
    policy_grid: Option<usize>,
    /// Monte-Carlo rollouts for the final policy value estimate.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Steps per rollout.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Chart kind: fan (x + one column per curve) or error (summary.csv).
    #[arg(long)]
    kind: Option<String>,
    /// Input CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dataset CSV scattered beneath a fan plot.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file name inside the run directory.
    #[arg(long)]
    output: Option<String>,
}

/// Flags shared by every command, plus the loaded config file.
pub struct Globals {
    pub file: config::KvMap,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let globals = Globals {
        file: config::load(cli.config.as_deref())?,
        seed: cli.seed,
        out_dir: cli.out_dir,
        workers: cli.workers,
    };
    match &cli.command {
        Command::GenData(args) => commands::gen_data(&globals, args),
        Command::Train(args) => commands::train(&globals, args),
        Command::Replicate(args) => commands::replicate(&globals, args),
        Command::Drl(args) => commands::drl_run(&globals, args),
        Command::Plot(args) => commands::plot_cmd(&globals, args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_documented_exit_codes() {
        let config: CliError = nqnet_core::Error::InvalidArgument("x".into()).into();
        assert_eq!(config.exit_code(), 1);
        let shape: CliError = nqnet_core::Error::ShapeMismatch("x".into()).into();
        assert_eq!(shape.exit_code(), 1);
        let diverged: CliError = nqnet_core::Error::Diverged { epoch: 3 }.into();
        assert_eq!(diverged.exit_code(), 2);
        let at: CliError = nqnet_core::Error::AtIteration {
            iteration: 2,
            source: Box::new(nqnet_core::Error::Diverged { epoch: 1 }),
        }
        .into();
        assert_eq!(at.exit_code(), 2);
        assert!(at.to_string().contains("iteration 2"), "{at}");
        let io: CliError = nqnet_core::Error::Io(std::io::Error::other("disk")).into();
        assert_eq!(io.exit_code(), 3);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; anything else is a config
            // problem and exits 1 rather than clap's usage code.
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
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
