use std::path::PathBuf;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("tiling error: {0}")]
    Tiling(String),
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("embolus placement failed: {0}")]
    Placement(String),
    #[error("empty batch: both sample pools are empty")]
    EmptyBatch,
    #[error("degenerate batch: no anchor contributes to the loss")]
    DegenerateBatch,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sensitivity undefined: no ground-truth findings")]
    UndefinedSensitivity,
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
