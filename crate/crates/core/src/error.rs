use thiserror::Error;

/// Errors raised anywhere in the core crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("mode {mode} out of range for rank-{rank} tensor")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("tensor of {needed} entries exceeds the expansion cap of {cap}")]
    CapExceeded { needed: usize, cap: usize },
    #[error("degree exceeds bound {0}")]
    DegreeExceedsBound(usize),
    #[error("points degenerate: design matrix is singular")]
    PointsDegenerate,
    #[error("f not polynomial of degree <= {degree} (refit residual {residual:.3e})")]
    NotPolynomial { degree: usize, residual: f64 },
    #[error("unknown block kind: {0}")]
    UnknownKind(String),
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("shape chain error at line {line} ({layer}): {msg}")]
    Chain { line: usize, layer: String, msg: String },
    #[error("infeasible sampling: {0}")]
    Infeasible(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
