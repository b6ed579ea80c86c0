use std::path::PathBuf;

/// Errors returned by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands (or an operand and a parameter set) disagree on shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its admissible range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The input is too short or otherwise degenerate for the requested operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An input series contained a NaN or infinite value.
    #[error("non-finite value at channel {channel}, step {step}")]
    NonFinite { channel: usize, step: usize },

    /// An API was called without the state it depends on.
    #[error("usage error: {0}")]
    Usage(String),

    /// A cell in a CSV file could not be parsed as a number.
    #[error("{path}: cannot parse row {row}, column {column} ({value:?})")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    /// A dataset is unusable (constant channel, too few rows, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint blob has the wrong magic or length.
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (backbone |w| = {backbone_norm:.4e}, filter |w| = {filter_norm:.4e})")]
    Diverged {
        epoch: usize,
        batch: usize,
        backbone_norm: f64,
        filter_norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_) | Error::Degenerate(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
