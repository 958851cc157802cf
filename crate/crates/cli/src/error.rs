use std::fmt;

use gbdsde::LabError;

/// Exit code when every enabled check passed.
pub const EXIT_OK: i32 = 0;
/// Exit code when a check failed.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Exit code for invalid configurations and usage errors.
pub const EXIT_INVALID: i32 = 2;
/// Exit code for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Unparseable or inconsistent configuration.
    Config(String),
    /// A configuration section rejected by the library.
    Invalid { field: String, source: LabError },
    Lab(LabError),
    Io(String),
    /// A report file that cannot be merged.
    MalformedReport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lab(LabError::Numerical(_) | LabError::NonConvergence { .. }) => EXIT_NUMERICAL,
            CliError::Invalid {
                source: LabError::Numerical(_) | LabError::NonConvergence { .. },
                ..
            } => EXIT_NUMERICAL,
            _ => EXIT_INVALID,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Invalid { field, source } => write!(f, "invalid config: {field}: {source}"),
            CliError::Lab(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::MalformedReport(m) => write!(f, "malformed report: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Lab(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
