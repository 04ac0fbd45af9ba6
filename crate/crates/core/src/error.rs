use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular matrix (|det| = {det:e})")]
    SingularMatrix { det: f64 },
    #[error("degenerate point: |w| = {w:e}")]
    DegeneratePoint { w: f64 },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("inconsistent representation shapes: {0}")]
    InconsistentShapes(String),
    #[error("neighbor graph invariant violated: {0}")]
    GraphInvariantViolation(String),
    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("checksum mismatch for {file}: manifest {expected:08x}, file {actual:08x}")]
    ChecksumMismatch {
        file: String,
        expected: u32,
        actual: u32,
    },
    #[error("corrupt tensor record: {0}")]
    CorruptTensor(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("regime prerequisite violated: {0}")]
    RegimePrereqViolation(String),
    #[error("split {0:?} is empty")]
    EmptySplit(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
