use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("separation detected: coefficient {column} reached |{value:.3}| > {cap} after {iterations} iterations")]
    Separation {
        column: String,
        value: f64,
        cap: f64,
        iterations: usize,
    },

    #[error("design matrix is rank deficient (smallest/largest eigenvalue ratio {ratio:.3e}); offending column near {column}")]
    Rank { column: String, ratio: f64 },

    #[error("{stage} failed to converge: {detail}")]
    Convergence { stage: String, detail: String },

    #[error("degenerate cell {cell}: {reason}")]
    DegenerateCell { cell: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::Dimension(_) | Error::Csv(_) | Error::DegenerateCell { .. } => {
                ErrorClass::Data
            }
            Error::Separation { .. } | Error::Rank { .. } | Error::Convergence { .. } => {
                ErrorClass::Numerical
            }
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
