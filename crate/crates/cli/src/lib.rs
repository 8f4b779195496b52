//! Command implementations behind the `dfld` binary.
//!
//! Every command writes its report to the given writer and returns an
//! [`Exit`] code, so the binary and the tests share one code path.

pub mod commands;
pub mod problem_file;

use decoupling::field::{GridError, SnapshotError};
use decoupling::global::BuildError;
use decoupling::problem::ProblemError;
use decoupling::simulate::SimError;
use thiserror::Error;

pub use commands::{check, maxinterval, simulate, solve, stepsize, verify};
pub use problem_file::{Overrides, ProblemFile};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 1,
    Inadmissible = 2,
    Blowup = 3,
    VerifyFailed = 4,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    File(#[from] problem_file::FileError),
    #[error("problem: {0}")]
    Problem(#[from] ProblemError),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("build: {0}")]
    Build(#[from] BuildError),
    #[error("simulate: {0}")]
    Sim(#[from] SimError),
    #[error("snapshot: {0}")]
    Snapshot(#[from] SnapshotError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            CliError::Problem(ProblemError::MissingDeclaration(_))
            | CliError::Build(BuildError::Inadmissible(_))
            | CliError::Build(BuildError::Problem(ProblemError::MissingDeclaration(_))) => {
                Exit::Inadmissible
            }
            CliError::Build(BuildError::Incomplete(_)) => Exit::Blowup,
            _ => Exit::Usage,
        }
    }
}

/// Report-stream failures are not worth a distinct exit code.
pub(crate) fn io_err(context: &str) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        context: context.to_string(),
        source,
    }
}
