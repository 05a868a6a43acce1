use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("label out of range: value {value} exceeds num_classes {num_classes}")]
    LabelOutOfRange { value: u8, num_classes: u8 },

    #[error("constant-intensity volume (1st and 99th percentile both equal {0})")]
    ConstantVolume(f64),

    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,

    #[error("class {0} is absent from the class-mean set")]
    AbsentClass(usize),

    #[error("transform is not invertible: {0}")]
    NotInvertible(&'static str),

    #[error("insufficient volumes: requested {requested}, available {available}")]
    InsufficientVolumes { requested: usize, available: usize },

    #[error("empty pool: {0}")]
    EmptyPool(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {0}")]
    Diverged(u64),

    #[error("no validation evaluation recorded")]
    NoValidation,

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}
