//! The `brrl` command line.

pub mod error;
pub mod manifest;
pub mod report;
pub mod solve;
pub mod train;
pub mod verify;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "brrl", version, about = "Bounded-ratio policy solvers, trainers and theory checks")]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, env = "BRRL_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form optimal bounded-ratio policy of an MDP.
    Solve(solve::SolveArgs),
    /// Closed form against the numeric optimizer on random per-state problems.
    OracleCheck(solve::OracleCheckArgs),
    /// Run the improvement-guarantee checks.
    VerifyTheory(verify::VerifyArgs),
    /// Train with BPO or the clipped baseline.
    Train(train::TrainArgs),
    /// Group-based training on a synthetic sequence task.
    GbpoDemo(train::GbpoArgs),
    /// Aggregate run directories into a long-format CSV.
    Report(report::ReportArgs),
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Failure(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Solve(a) => solve::cmd_solve(a),
        Command::OracleCheck(a) => solve::cmd_oracle_check(a, cli.seed.unwrap_or(0)),
        Command::VerifyTheory(a) => verify::cmd_verify(a),
        Command::Train(a) => train::cmd_train(a, cli.seed),
        Command::GbpoDemo(a) => train::cmd_gbpo(a, cli.seed),
        Command::Report(a) => report::cmd_report(a),
    }
}
