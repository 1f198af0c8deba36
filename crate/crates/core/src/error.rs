use thiserror::Error;

/// Errors raised by model construction, validation and bounded computations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },

    #[error("entry ({row}, {col}) = {value} outside [0, 1]")]
    Entry { row: usize, col: usize, value: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("chain is not irreducible: {classes} recurrent classes")]
    NotIrreducible { classes: usize },

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("identity check failed: {0}")]
    Identity(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Validation errors map to exit code 2, budget errors to 3.
    pub fn is_budget(&self) -> bool {
        matches!(self, Error::Budget(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
