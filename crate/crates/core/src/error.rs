use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("background magnitude {magnitude:e} at {freq_hz} Hz is too small to divide out")]
    SingularBackground { freq_hz: f64, magnitude: f64 },

    #[error("no resonance dip found (depth {depth:.3e} vs noise floor {noise:.3e})")]
    NoDipFound { depth: f64, noise: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("propagation loss is zero, mean free path is infinite")]
    InfinitePath,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("frequencies are not strictly increasing at line {line}")]
    NonMonotone { line: usize },

    #[error("unsupported file: {0}")]
    Unsupported(String),

    #[error("row {row}: field `{field}`: {message}")]
    Schema { row: usize, field: String, message: String },

    #[error("refusing to write non-finite value in `{0}`")]
    NonFinite(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI for its error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::SingularBackground { .. } => "singular_background",
            Error::NoDipFound { .. } => "no_dip_found",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::NonConvergence { .. } => "non_convergence",
            Error::InsufficientData(_) => "insufficient_data",
            Error::InfinitePath => "infinite_path",
            Error::Parse { .. } => "parse",
            Error::NonMonotone { .. } => "non_monotone",
            Error::Unsupported(_) => "unsupported",
            Error::Schema { .. } => "schema",
            Error::NonFinite(_) => "non_finite",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

/// Positive, finite check shared by the parameter validators.
pub(crate) fn require_positive(field: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::invalid(field, format!("must be finite, got {value}")));
    }
    if value <= 0.0 {
        return Err(Error::invalid(field, format!("must be positive, got {value}")));
    }
    Ok(())
}

pub(crate) fn require_finite(field: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::invalid(field, format!("must be finite, got {value}")));
    }
    Ok(())
}

pub(crate) fn require_non_negative(field: &str, value: f64) -> Result<()> {
    require_finite(field, value)?;
    if value < 0.0 {
        return Err(Error::invalid(field, format!("must be non-negative, got {value}")));
    }
    Ok(())
}
