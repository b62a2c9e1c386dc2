use std::fmt;

use dbat::DbatError;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Checkpoint(String),
    Io(String),
    Run(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Io(_) => 5,
            CliError::Run(_) => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Io(_) => "io",
            CliError::Run(_) => "run",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Checkpoint(m) | CliError::Io(m) | CliError::Run(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    /// `error: code=<kind> exit=<n> msg=<text>` on a single line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self
            .message()
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join("; ");
        write!(f, "error: code={} exit={} msg={}", self.kind(), self.code(), msg)
    }
}

impl From<DbatError> for CliError {
    fn from(e: DbatError) -> Self {
        match e {
            DbatError::Config(m) => CliError::Config(m),
            DbatError::Checkpoint(m) => CliError::Checkpoint(m),
            DbatError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}
