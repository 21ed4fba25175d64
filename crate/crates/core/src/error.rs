use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length error: {0}")]
    Length(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    /// A required artifact (checkpoint, trained model, registry) is missing.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// An external executable could not be launched.
    #[error("environment error: `{binary}` is not available: {detail}")]
    Environment { binary: String, detail: String },

    #[error("alignment error: correlation peak {peak:.3} is below {min:.3}")]
    Alignment { peak: f64, min: f64 },

    #[error("enrollment error: {0}")]
    Enrollment(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("conversion error: {0}")]
    Conversion(String),

    /// Training produced a non-finite loss; the last good checkpoint is kept.
    #[error("divergence at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
