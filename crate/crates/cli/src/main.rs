use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfg_cli::config::RunConfig;
use mfg_cli::{run, CliError};

/// Mean-field games with common noise: solvers, oracle comparison and
/// N-player checks.
#[derive(Parser)]
#[command(name = "mfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the mean-field FBSDE and write the solution and its report.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Restart from the feedback saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Check the model assumptions and the sufficient conditions.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the solver with the linear-quadratic oracle.
    CompareOracle {
        #[command(flatten)]
        common: Common,
    },
    /// Nash gaps of the mean-field feedback in N-player games.
    Nash {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.to_string_lossy().into_owned();
        }
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::Config("`--threads` must be positive".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { common, resume } => {
            let out = run::solve(&common.load()?, resume)?;
            let r = &out.report;
            println!(
                "{}: J = {:.6}, {} final iterations, max ratio {}",
                r.method,
                r.cost,
                r.final_iterations,
                r.max_ratio.map_or("n/a".into(), |x| format!("{x:.4}"))
            );
        }
        Command::Validate { common } => {
            let s = run::validate(&common.load()?)?;
            println!("{}: all checks passed", s.preset);
        }
        Command::CompareOracle { common } => {
            let s = run::compare_oracle(&common.load()?)?;
            println!(
                "{}: control {:.4} state {:.4} adjoint {:.4}; dt trend decreasing {}, K trend decreasing {}",
                s.method, s.errors.control, s.errors.state, s.errors.adjoint, s.dt_decreasing, s.k_decreasing
            );
        }
        Command::Nash { common } => {
            let s = run::nash(&common.load()?)?;
            for (n, g) in s.players.iter().zip(&s.median_gaps) {
                println!("N = {n}: median gap {g:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mfg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
