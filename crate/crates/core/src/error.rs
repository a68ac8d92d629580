use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("input file is empty")]
    EmptyFile,

    #[error("missing column \"{0}\"")]
    MissingColumn(String),

    #[error("non-numeric value \"{value}\" in column \"{column}\", row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-finite outcome value, row {row}")]
    NonFinite { row: usize },

    #[error("invalid category value {value}, row {row} (categories are 1..=K)")]
    InvalidCategory { row: usize, value: i64 },

    #[error("invalid instrument value, row {row} (got {value}, expected 0 or 1)")]
    InvalidInstrument { row: usize, value: String },

    #[error("malformed csv, row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("instrument degenerate: no observations with W = {missing}")]
    DegenerateInstrument { missing: u8 },

    #[error("empty cell (W = {instrument}, X = {category}) required by this operation")]
    EmptyCell { instrument: u8, category: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("moment table has J = {got}, but at least {needed} is required")]
    InsufficientPower { needed: usize, got: usize },

    #[error("error family {family} has no closed-form moment of order {order}")]
    NoClosedForm { family: String, order: usize },

    #[error(
        "Jacobian of the identifying system is numerically singular (condition number {condition:.3e})"
    )]
    SingularJacobian { condition: f64 },

    #[error("covariance matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("relevance precondition violated: {0}")]
    Relevance(String),

    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid search family: {0}")]
    InvalidFamily(String),

    #[error("K! overflows for K = {0}")]
    Overflow(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a statistical requirement (as opposed to bad input or usage).
    pub fn is_statistical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateInstrument { .. }
                | Error::EmptyCell { .. }
                | Error::SingularJacobian { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::Relevance(_)
        )
    }
}
