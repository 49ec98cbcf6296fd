//! Error classes and their process exit codes.

use std::fmt;
use std::path::Path;

use kdaudit::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// Failure writing outputs.
    Output(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

pub fn output_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Output(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Output(_) => EXIT_RUNTIME,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                Error::Degenerate(_) => EXIT_RUNTIME,
                Error::Io { .. }
                | Error::Manifest { .. }
                | Error::Alignment { .. }
                | Error::Encoding { .. }
                | Error::MalformedValue { .. }
                | Error::DuplicateKey(_)
                | Error::MissingRole(_)
                | Error::MissingPrefix { .. }
                | Error::UnknownScore(_)
                | Error::IndexOutOfRange { .. }
                | Error::UnknownMetric(_)
                | Error::MissingCell { .. }
                | Error::Record { .. } => EXIT_DATA,
            },
        }
    }
}
