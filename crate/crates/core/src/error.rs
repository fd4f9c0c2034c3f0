use std::fmt;

/// Height × width × channels, used in shape-mismatch diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: Shape, found: Shape },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("too small for {levels} MS-SSIM levels: need min side {required}, found {found}")]
    LevelCount { levels: usize, required: usize, found: usize },

    #[error("non-finite loss at probe coordinate {0}")]
    Probe(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn shape(expected: Shape, found: Shape) -> Self {
        Error::Shape { expected, found }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
