use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of a matrix and its label sequences disagree, or a sequence
    /// violates its ordering/finiteness invariants.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("label {0} is not in the input label set")]
    UnknownLabel(f64),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("value {value} outside range [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("loss domain error: {0}")]
    Domain(String),

    #[error("linear program is infeasible (phase-1 residual {residual:.3e})")]
    Infeasible { residual: f64 },

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("simplex hit the iteration limit ({0})")]
    IterationLimit(usize),

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("{other:?}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
