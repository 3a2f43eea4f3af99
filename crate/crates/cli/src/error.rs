use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Bad flags, config file, or parameter values.
    pub const CONFIG: i32 = 2;
    /// A file could not be read or written.
    pub const IO: i32 = 3;
    /// Input data was malformed, inconsistent, or incomplete.
    pub const DATA: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io(_) => exit::IO,
            CliError::Data(_) => exit::DATA,
        }
    }

    /// Same class, message prefixed with `context`.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{context}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{context}: {m}")),
        }
    }
}

impl From<sparse_rnnt::Error> for CliError {
    fn from(e: sparse_rnnt::Error) -> Self {
        use sparse_rnnt::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_) => CliError::Io(msg),
            E::Parameter(_) | E::Contract(_) | E::Vocabulary(_) => CliError::Config(msg),
            E::Shape { .. }
            | E::EmptyInput(_)
            | E::Incomplete(_)
            | E::Wav(_)
            | E::Corrupt { .. }
            | E::Format(_)
            | E::Json(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
