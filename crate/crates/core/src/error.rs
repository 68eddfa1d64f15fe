use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape { op: &'static str, detail: String },
    /// An operation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// Gradients can only be taken of single-element outputs.
    NotScalar { shape: Vec<usize> },
    InvalidArgument(String),
    /// Energy became non-finite during the inner minimization.
    Diverged { step: usize, source: Box<Error> },
    /// Loss became non-finite for one sample of a training batch.
    NonFiniteLoss { sample: usize, source: Box<Error> },
    Io { path: PathBuf, source: io::Error },
    /// Malformed file content (IDX, PGM, PNG, checkpoint).
    Format { path: Option<PathBuf>, detail: String },
    Truncated { expected: usize, actual: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn format(path: Option<&std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.map(|p| p.to_path_buf()),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::NotScalar { shape } => {
                write!(f, "gradient requested of non-scalar output with shape {shape:?}")
            }
            Error::InvalidArgument(detail) => write!(f, "invalid argument: {detail}"),
            Error::Diverged { step, source } => {
                write!(f, "energy minimization diverged at step {step}: {source}")
            }
            Error::NonFiniteLoss { sample, source } => {
                write!(f, "non-finite loss for batch sample {sample}: {source}")
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { path: Some(p), detail } => write!(f, "{}: {detail}", p.display()),
            Error::Format { path: None, detail } => write!(f, "{detail}"),
            Error::Truncated { expected, actual } => write!(
                f,
                "truncated input: expected at least {expected} bytes, found {actual}"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Diverged { source, .. } | Error::NonFiniteLoss { source, .. } => {
                Some(source.as_ref())
            }
            _ => None,
        }
    }
}
