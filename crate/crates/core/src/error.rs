use thiserror::Error;

use crate::autocalib::CalibrationResult;
use crate::multilateration::TagFix;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("degenerate geometry{}: {reason}", anchor_suffix(*.anchor))]
    DegenerateGeometry {
        anchor: Option<usize>,
        reason: String,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid timing: {0}")]
    InvalidTiming(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("calibration did not converge after {} iterations (rms residual {:.6} m)", .0.iterations, .0.rms_residual)]
    CalibrationNotConverged(Box<CalibrationResult>),

    #[error("tag fix did not converge after {} iterations (rms residual {:.6} m)", .0.iterations, .0.rms_residual)]
    FixNotConverged(TagFix),

    #[error("normal equations are singular beyond damping")]
    SingularUpdate,

    #[error("anchors are collinear (condition number {condition:.3e})")]
    CollinearAnchors { condition: f64 },

    #[error("protocol violation at node {node}: {reason}")]
    ProtocolViolation { node: usize, reason: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("missing distance for pair ({0}, {1})")]
    MissingPair(usize, usize),

    #[error("empty trace")]
    EmptyTrace,

    #[error("invalid value: {0}")]
    InvalidValue(String),
}

fn anchor_suffix(anchor: Option<usize>) -> String {
    match anchor {
        Some(id) => format!(" at anchor {id}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn degenerate(reason: impl Into<String>) -> Self {
        Error::DegenerateGeometry {
            anchor: None,
            reason: reason.into(),
        }
    }

    pub(crate) fn with_anchor(self, id: usize) -> Self {
        match self {
            Error::DegenerateGeometry { reason, .. } => Error::DegenerateGeometry {
                anchor: Some(id),
                reason,
            },
            other => other,
        }
    }
}
