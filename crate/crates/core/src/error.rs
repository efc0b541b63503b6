use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("image decode failed for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("image smaller than crop: {width}x{height} < {size}")]
    ImageSmallerThanCrop { width: usize, height: usize, size: usize },

    #[error("kernel of side {kernel} larger than image {width}x{height}")]
    KernelTooLarge { kernel: usize, width: usize, height: usize },

    #[error("not a {expected} file (bad magic {found:?})")]
    BadMagic { expected: &'static str, found: [u8; 4] },

    #[error("unsupported {what} format version {version}")]
    Version { what: &'static str, version: u32 },

    #[error("truncated {0} file")]
    Truncated(&'static str),

    #[error("shape mismatch in {layer}: {message}")]
    Shape { layer: &'static str, message: String },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("ICA did not converge after {iterations} iterations (last change {last_delta:e})")]
    IcaNotConverged { iterations: usize, last_delta: f64 },

    #[error("SVM did not converge after {iterations} iterations (KKT residual {residual:e})")]
    SvmNotConverged { iterations: usize, residual: f64 },

    #[error("missing view columns: {0:?}")]
    MissingViews(Vec<String>),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
