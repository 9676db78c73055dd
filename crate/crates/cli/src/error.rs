use lsp_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    /// A replayed run produced different artifacts than its manifest records.
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    /// Process exit status: 2 config, 3 data or format, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_) | Error::Shape(_)) => 2,
            CliError::Core(Error::Parse { .. } | Error::Format(_) | Error::Io(_)) => 3,
            CliError::Core(Error::Numeric(_) | Error::DegenerateNeighborhood(_)) => 4,
            CliError::Mismatch(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn config(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Config(msg.into()))
}

pub(crate) fn format(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Format(msg.into()))
}
