use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Core(#[from] ctxdiff::Error),

    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 2 for configuration and contract errors, 3 for numeric failures,
    /// 4 for file and format errors.
    pub fn exit_code(&self) -> i32 {
        use ctxdiff::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) | CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Io(_) => 4,
                E::NonFinite(_) | E::Numeric(_) | E::NonDeterministic | E::BackwardTwice | E::NonScalarLoss(_) => 3,
                E::Shape { .. } | E::InvalidArgument(_) | E::UnknownTask { .. } => 2,
            },
        }
    }
}
