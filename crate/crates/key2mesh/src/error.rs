use std::path::PathBuf;

/// Crate-wide error type. The CLI maps [`Error::is_validation`] to exit
/// code 2 and everything else to 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("second-order path supports affine/prelu/skip-add only, found {op}")]
    SecondOrderUnsupported { op: &'static str },

    #[error("batch norm needs at least 2 rows in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("non-finite value reached optimizer state of {name}")]
    NonFiniteState { name: String },

    #[error("degenerate 6d rotation input at joint {joint}")]
    Degenerate6d { joint: usize },

    #[error("{what} is not a rotation matrix")]
    NotARotation { what: String },

    #[error("body model invalid: {0}")]
    InvalidModel(String),

    #[error("keypoint(s) {indices:?} at or behind the camera plane")]
    BehindCamera { indices: Vec<usize> },

    #[error("need at least {need} usable points, got {got}")]
    Underdetermined { need: usize, got: usize },

    #[error("translation fit did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("frame has {visible} visible keypoints, need at least 2 to span a bounding box")]
    DegenerateFrame { visible: usize },

    #[error("augmentation retries exhausted: {0}")]
    AugmentationFailed(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bad file format in {path}: {detail}")]
    BadFormat { path: PathBuf, detail: String },

    #[error("model invariant violated in {path}: {detail}")]
    InvariantViolation { path: PathBuf, detail: String },

    #[error("parse error at line {line} of {path}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at step {step}: {detail}")]
    TrainingAborted { step: u64, detail: String },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// True for input/configuration mistakes a caller can fix up front,
    /// as opposed to failures that surface mid-run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidProbability(_)
                | Error::InvalidModel(_)
                | Error::InvalidParameter(_)
                | Error::BadFormat { .. }
                | Error::InvariantViolation { .. }
                | Error::Parse { .. }
                | Error::Incompatible(_)
                | Error::MissingFile(_)
        )
    }
}
