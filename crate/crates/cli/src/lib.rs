//! Command-line front end: `render`, `metrics`, `validate` and `sweep`.
//!
//! Exit codes: 0 ok, 1 usage, 2 pipeline error, 3 validation failure.

pub mod args;
pub mod commands;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{module}: {source}")]
    Pipeline { module: &'static str, source: rarenet::Error },
    #[error("{0}")]
    Io(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Pipeline { .. } | CliError::Io(_) => EXIT_PIPELINE,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
}

impl From<rarenet::Error> for CliError {
    fn from(e: rarenet::Error) -> Self {
        CliError::Pipeline { module: module_of(&e), source: e }
    }
}

/// Pipeline module an error originates from.
pub fn module_of(e: &rarenet::Error) -> &'static str {
    use rarenet::Error::*;
    match e {
        Io(_) | Parse(_) | NonPlanar { .. } | NonConvex { .. } | DegeneratePolygon { .. } | UnknownMaterial { .. }
        | InvalidMaterial(_) | SourceOutside(_) | ReceiverOutside(_) | OpenScene(_) | DegenerateScene(_) => "scene",
        IsolatedPatch { .. } => "kernel",
        NoTotalSupport { .. } | NoConvergence { .. } => "matrices",
        ReceiverOccluded => "tracing",
        Unstable { .. } | InvalidParameter(_) => "network",
        Metric(_) => "metrics",
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
