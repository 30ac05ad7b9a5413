use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures raised while ingesting a CSV file. Each variant maps to a
/// distinct machine-readable code (see [`IngestError::code`]).
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed CSV at line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: missing or non-numeric value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: treatment value `{value}` is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("covariate `{0}` is constant")]
    ConstantCovariate(String),
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::Malformed { .. } => "malformed_csv",
            IngestError::MissingColumn(_) => "missing_column",
            IngestError::MissingValue { .. } => "missing_value",
            IngestError::NonBinaryTreatment { .. } => "non_binary_treatment",
            IngestError::ConstantCovariate(_) => "constant_covariate",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("degenerate neighborhood at grid index {k}: kernel mass {mass:e}")]
    DegenerateNeighborhood { k: usize, mass: f64 },
    #[error("covariance solve failed at grid index {k} after jitter retries")]
    SolverFailure { k: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training failed at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("benchmark harness: {0}")]
    Harness(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateData(msg.into())
    }

    /// Stable machine-readable code for error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DegenerateData(_) => "degenerate_data",
            Error::DegenerateNeighborhood { .. } => "degenerate_neighborhood",
            Error::SolverFailure { .. } => "solver_failure",
            Error::Numeric(_) => "numeric",
            Error::Training { .. } => "training",
            Error::Harness(_) => "harness",
            Error::Ingest(e) => e.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
