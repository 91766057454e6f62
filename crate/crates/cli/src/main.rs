//! `mfoc`: mean-field optimal control solver front end.
//!
//! Exit codes: 0 success, 1 fatal error, 2 non-convergence,
//! 3 comparison failure.

mod commands;
mod config;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EXIT_FATAL, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "mfoc",
    about = "Self-consistent mean-field solver for stochastic optimal control \
             with random pairwise couplings",
    version
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug); warnings always shown.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iterate the two-time kernels to self-consistency and report the cost.
    SolveRs {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides output.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average the exact or Monte Carlo finite-population cost over disorder.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a solve summary against an oracle summary.
    Compare {
        /// summary.json from `solve-rs`.
        #[arg(long)]
        rs: PathBuf,
        /// oracle.json from `oracle`.
        #[arg(long)]
        oracle: PathBuf,
        /// Finite-population allowance coefficient c in c / agents.
        #[arg(long, default_value_t = 2.0)]
        finite_size_coeff: f64,
        /// Optional directory for compare.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-field single-agent solve; emits value-function slices.
    SingleAgent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the weight function and forward density as CSV.
        #[arg(long)]
        dump_fields: bool,
    },
}

fn run(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::SolveRs { config, out } => {
            let cfg = config::load_config(&config).map_err(|e| e.to_string())?;
            commands::cmd_solve(&cfg, out.as_deref())
        }
        Command::Oracle { config, out } => {
            let cfg = config::load_config(&config).map_err(|e| e.to_string())?;
            commands::cmd_oracle(&cfg, out.as_deref())
        }
        Command::Compare {
            rs,
            oracle,
            finite_size_coeff,
            out,
        } => commands::cmd_compare(&rs, &oracle, finite_size_coeff, out.as_deref()),
        Command::SingleAgent {
            config,
            out,
            dump_fields,
        } => {
            let cfg = config::load_config(&config).map_err(|e| e.to_string())?;
            commands::cmd_single_agent(&cfg, out.as_deref(), dump_fields)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(EXIT_FATAL);
            }
            print!("{e}");
            return ExitCode::from(EXIT_OK);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
