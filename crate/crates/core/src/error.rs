use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain an operation accepts.
    #[error("input domain: {0}")]
    Domain(String),

    /// Vector or matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A state became non-finite while integrating.
    #[error("numerical divergence on day {day:.2}: {what}")]
    Divergence { day: f64, what: String },

    #[error("estimation: {0}")]
    Estimation(String),

    #[error("fit failed after {iterations} iterations (sse {sse:.6e}): {reason}")]
    FitFailure {
        iterations: usize,
        sse: f64,
        reason: String,
    },

    #[error("mobility row for region `{0}` has zero total activity")]
    DegenerateRow(String),

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
