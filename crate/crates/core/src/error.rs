use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix in block {block}")]
    Singular { block: &'static str },

    #[error(
        "solver did not converge after {iterations} iterations \
         (stationarity {stationarity:.3e}, complementarity {complementarity:.3e})"
    )]
    Convergence {
        iterations: usize,
        stationarity: f64,
        complementarity: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("all {count} grid fits failed; first failure: {first}")]
    AllFitsFailed { count: usize, first: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in structured error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Singular { .. } => "singular",
            Error::Convergence { .. } => "convergence",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Parse { .. } => "parse",
            Error::AllFitsFailed { .. } => "all_fits_failed",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
