use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value produced in block {block}")]
    Overflow { block: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("magnitude bound violated: {0}")]
    BoundViolation(String),
    #[error("unsupported block: {0}")]
    Unsupported(String),
    #[error("budget exceeded: {what} needs {required}, cap is {cap}")]
    Resource { what: String, required: u128, cap: u128 },
    #[error("chart coverage failure at sample {sample:?}")]
    Coverage { sample: Vec<f64> },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("duplicate point: neighbor distance {0:e} below 1e-12")]
    DuplicatePoint(f64),
    #[error("zero denominator: {0}")]
    ZeroDenominator(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Resource { .. } => 2,
            Error::Acceptance(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
