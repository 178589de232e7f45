//! Command-line front end for `kernflow`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

pub mod args;
pub mod commands;

use std::process::ExitCode;

use clap::Parser;

pub use args::Cli;

/// Thread count for the parallel kernel and loss evaluation; all cores when unset.
pub const THREADS_ENV: &str = "KERNFLOW_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files or parameter values.
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<kernflow::Error> for CliError {
    fn from(e: kernflow::Error) -> Self {
        use kernflow::Error as E;
        match e {
            // the message already embeds any underlying io error
            E::InvalidConfig(_) | E::GridTooLarge { .. } | E::KernelTooLarge { .. } => {
                CliError::Usage(anyhow::Error::msg(e.to_string()))
            }
            other => CliError::Runtime(anyhow::Error::msg(other.to_string())),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Sizes the global thread pool from [`THREADS_ENV`].
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run_cli(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        args::Command::Estimate(a) => commands::estimate(&a),
        args::Command::Benchmark(a) => commands::benchmark(&a),
        args::Command::Synth(a) => commands::synth(&a),
        args::Command::ExportViz(a) => commands::export_viz(&a),
    }
}

/// Parses `std::env::args`, runs the command and maps the outcome to an exit code.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
