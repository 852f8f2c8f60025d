use std::path::PathBuf;

use stackroute_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config {path}: {message}")]
    Toml { path: PathBuf, message: String },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;

/// 0 success, 2 input error, 3 convergence error, 4 scale error, 1 anything else.
pub fn exit_code(err: &CliError) -> u8 {
    match err {
        CliError::Config(_) | CliError::Read { .. } | CliError::Toml { .. } | CliError::Json(_) => 2,
        CliError::Write { .. } | CliError::Csv(_) => 1,
        CliError::Core(e) => match e.root() {
            CoreError::Io { .. }
            | CoreError::MissingColumn(_)
            | CoreError::UnexpectedColumn(_)
            | CoreError::Parse { .. }
            | CoreError::Validation { .. }
            | CoreError::NotFound(_)
            | CoreError::DegenerateCapacity(_)
            | CoreError::Config(_)
            | CoreError::Shape(_)
            | CoreError::Argument(_)
            | CoreError::SchemaMismatch { .. }
            | CoreError::ModelFile(_)
            | CoreError::Serde(_) => 2,
            CoreError::Convergence { .. }
            | CoreError::Singular(_)
            | CoreError::BoundaryPoint { .. }
            | CoreError::Numerical(_) => 3,
            CoreError::Scale { .. } => 4,
            _ => 1,
        },
    }
}
