use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] slipgaze::Error),
}

impl CliError {
    pub fn from_validation(e: slipgaze::Error) -> Self {
        match e {
            slipgaze::Error::Invalid { path, message } => CliError::Config(format!("{path}: {message}")),
            other => CliError::Config(other.to_string()),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(slipgaze::Error::MissingGroundTruth) => 4,
            CliError::Core(_) => 1,
        }
    }
}
