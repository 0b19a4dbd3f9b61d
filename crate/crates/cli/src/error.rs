use std::fmt;

/// Command failure, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations (exit 2).
    Usage(String),
    /// Unreadable, malformed or inconsistent inputs, I/O failures (exit 3).
    Data(anyhow::Error),
    /// The optimizer did not reach a usable minimum (exit 4).
    Convergence(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Convergence(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e:#}"),
            CliError::Convergence(m) => write!(f, "fit did not converge: {m}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches context and turns any error into a data error.
pub trait DataContext<T> {
    fn data(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E> DataContext<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn data(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Data(e.into().context(what())))
    }
}
