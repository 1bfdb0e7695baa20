//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid tensor shape (zero extent, unsupported rank, length mismatch).
    Shape(String),
    /// Window or index outside the valid range.
    Bounds(String),
    /// Invalid argument value.
    Arg(String),
    /// Filesystem failure, annotated with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed file content. `offset` is the byte position where parsing failed.
    Format { path: PathBuf, offset: usize, msg: String },
    /// Iterative solver failed to reach its tolerance.
    Convergence { residual: f64, iters: usize },
    /// Dataset/config record failed validation. `line` is 1-based.
    Validation { line: usize, msg: String },
    /// Network spec cannot be instantiated; names the offending layer.
    Spec { layer: usize, msg: String },
    /// forward/backward cache does not belong to the current parameters.
    State(String),
    /// Non-finite value where the contract requires finite numbers.
    NonFinite(String),
    /// Model file failed its checksum.
    Corrupt(String),
    /// Model file version is not supported.
    Version { found: u32, supported: u32 },
    /// Pearson correlation is undefined (zero variance in one input).
    UndefinedCorrelation(String),
    /// One or more bad config keys; every offense is listed.
    Config(Vec<String>),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Bounds(m) => write!(f, "bounds error: {m}"),
            Error::Arg(m) => write!(f, "invalid argument: {m}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format { path, offset, msg } => {
                write!(f, "format error in {} at byte {offset}: {msg}", path.display())
            }
            Error::Convergence { residual, iters } => {
                write!(f, "solver did not converge: residual {residual:e} after {iters} iterations")
            }
            Error::Validation { line, msg } => write!(f, "validation error at line {line}: {msg}"),
            Error::Spec { layer, msg } => write!(f, "invalid network spec at layer {layer}: {msg}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Corrupt(m) => write!(f, "corrupt model file: {m}"),
            Error::Version { found, supported } => {
                write!(f, "unsupported model file version {found} (supported: {supported})")
            }
            Error::UndefinedCorrelation(m) => write!(f, "undefined correlation: {m}"),
            Error::Config(errs) => {
                writeln!(f, "config errors:")?;
                for e in errs {
                    writeln!(f, "  {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
