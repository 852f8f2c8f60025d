use std::path::PathBuf;

use chrono::NaiveDate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error: unexpected column `{0}`")]
    UnexpectedColumn(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("degenerate capacity for `{0}`: mean output speed is zero")]
    DegenerateCapacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate game: {0}")]
    Degenerate(String),

    #[error("equilibrium did not converge in {rounds} rounds (last Wardrop gap {gap:.3e})")]
    Convergence { rounds: usize, gap: f64 },

    #[error("singular KKT system: {0}")]
    Singular(String),

    #[error(
        "boundary point: strict complementarity fails (smallest inactive reduced cost {margin:.3e}); \
         use the one-sided sub-gradient instead"
    )]
    BoundaryPoint { margin: f64 },

    #[error("degenerate aggregation weights: avg scores over the aggregated rivals sum to zero")]
    DegenerateWeights,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("problem size {size} exceeds the exact-enumeration bound {limit}; use the sweep method")]
    Scale { size: usize, limit: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("scorer feature schema mismatch: model has {found}, featurizer expects {expected}")]
    SchemaMismatch { expected: String, found: String },

    #[error("invalid model file: {0}")]
    ModelFile(String),

    #[error("linear program: {0}")]
    Lp(String),

    #[error("day {date}: {source}")]
    Day {
        date: NaiveDate,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// The innermost error, looking through per-day wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Day { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Validation {
            row: None,
            message: message.into(),
        }
    }
}
