use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while decoding a QTNS archive. Each corruption mode has its own
/// variant so callers (and tests) can tell them apart.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic: expected \"QTNS\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error(
        "tensor {name:?}: shape {shape:?} holds {expected} elements but {declared} were declared"
    )]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        declared: u64,
    },

    #[error("tensor {name:?}: unsupported dtype code {code}")]
    UnsupportedDtype { name: String, code: u8 },

    #[error("tensor {name:?}: dimension sizes must be >= 1, got {shape:?}")]
    ZeroDimension { name: String, shape: Vec<usize> },

    #[error("tensor name is not valid UTF-8")]
    InvalidName,

    #[error("{0} unexpected trailing bytes after the last entry")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("factorization diverged at iteration {iteration}: loss became {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("config names layers missing from the archive: {}", .0.join(", "))]
    UnknownLayers(Vec<String>),

    #[error("layer {layer:?}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("report mismatch in {field}: report says {reported}, artifacts give {recomputed}")]
    Mismatch {
        field: String,
        reported: String,
        recomputed: String,
    },

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_layer(self, layer: &str) -> Error {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through layer context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            other => other,
        }
    }
}
