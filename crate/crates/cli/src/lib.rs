//! `sqdm` command-line driver: verification, PCA, training, sampling,
//! squeeze-strength sweeps and drift reports on top of `sqdm-core`.
//!
//! Every command resolves its configuration (defaults, then `--config`
//! file, then flags), writes its artifacts under `--out`, and records the
//! resolved config in a `<command>.manifest.json` next to them.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Parse(String),
    /// A check or metric failed; the command ran to completion.
    #[error("{0}")]
    Failure(String),
    #[error(transparent)]
    Core(#[from] sqdm_core::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use sqdm_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) | CliError::Parse(_) => EXIT_IO,
            CliError::Failure(_) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Parse { .. } => EXIT_IO,
                E::InvalidSchedule(_)
                | E::InvalidSqueeze(_)
                | E::InvalidArgument(_)
                | E::TimestepOutOfRange { .. } => EXIT_USAGE,
                _ => EXIT_FAILURE,
            },
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
