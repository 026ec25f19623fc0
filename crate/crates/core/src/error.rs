use std::path::PathBuf;

/// Errors raised across the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum CgoError {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CgoError>,
    },
}

impl CgoError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        CgoError::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CgoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        CgoError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &CgoError {
        match self {
            CgoError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad user input rather than numerics or IO.
    pub fn is_parameter_error(&self) -> bool {
        matches!(
            self.root(),
            CgoError::Parameter(_) | CgoError::Dimension { .. } | CgoError::Range(_) | CgoError::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CgoError>;
