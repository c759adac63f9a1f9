//! Batch front end over `horizon_fuse`: analytic gain surfaces, Monte
//! Carlo studies, and the fit-copula / transform / score pipeline for user
//! forecast archives.

pub mod archive;
pub mod commands;
pub mod error;
pub mod output;

use clap::{Parser, Subcommand};

use commands::{AnalyticArgs, FitCopulaArgs, MonteCarloArgs, ScoreArgs, SimulateArchiveArgs, TransformArgs};
pub use error::{CliError, CliResult};

const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "horizon-fuse", version, about = "Copula fusion of direct multi-horizon density forecasts")]
pub struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "HORIZON_FUSE_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gain surface of the dependence-aware AR(1) forecast and MSFE ratios.
    Analytic(AnalyticArgs),
    /// Monte Carlo experiments from a TOML file.
    Montecarlo(MonteCarloArgs),
    /// PIT panel and copula correlation from a forecast archive.
    FitCopula(FitCopulaArgs),
    /// Target-frequency draws from archived marginals.
    Transform(TransformArgs),
    /// Scores, EPA tests and PIT tests of draw forecasts.
    Score(ScoreArgs),
    /// Simulate a forecast archive from the VAR(1) design.
    SimulateArchive(SimulateArchiveArgs),
}

/// Run a parsed command on a thread pool of the requested size.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be >= 1".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    pool.install(|| match &cli.command {
        Command::Analytic(a) => commands::cmd_analytic(a, seed),
        Command::Montecarlo(a) => commands::cmd_montecarlo(a, cli.seed),
        Command::FitCopula(a) => commands::cmd_fit_copula(a),
        Command::Transform(a) => commands::cmd_transform(a, seed),
        Command::Score(a) => commands::cmd_score(a, seed),
        Command::SimulateArchive(a) => commands::cmd_simulate_archive(a, seed),
    })
}
