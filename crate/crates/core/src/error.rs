use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DspaError>;

#[derive(Debug, Error)]
pub enum DspaError {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unexpected end of data")]
    UnexpectedEof,

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("prompt length T_x = {t_x} exceeds token count T = {t}")]
    PromptTooLong { t_x: usize, t: usize },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("triple {triple_id}: {reason}")]
    InconsistentTriple { triple_id: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("threshold mismatch between partial maps")]
    ThresholdMismatch,

    #[error("degenerate scores: augment and ablate sets overlap on features {overlap:?}")]
    DegenerateScores { overlap: Vec<usize> },

    #[error("ill-conditioned gram restriction (condition number {condition:.3e} > {limit:.0e}); increase the ridge")]
    IllConditioned { condition: f64, limit: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DspaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DspaError::InvalidInput(msg.into())
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        DspaError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    /// True for errors caused by bad user input rather than an internal or
    /// environment failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, DspaError::Io(_))
    }
}

pub(crate) fn ensure_dims(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DspaError::dims(what, expected, got));
    }
    Ok(())
}

pub(crate) fn ensure_finite(what: &str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DspaError::NonFinite(what.to_string()))
    }
}
