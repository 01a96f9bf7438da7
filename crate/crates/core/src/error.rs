use std::fmt;

/// Errors raised anywhere in the compression toolkit.
#[derive(Debug)]
pub enum Error {
    /// An op received inputs whose shapes violate its contract.
    Dimension {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    /// A non-finite value appeared where finiteness is required.
    Numeric(String),
    /// Training loss became non-finite; carries the best checkpoint seen so far.
    Diverged {
        step: u64,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
    /// An index (label, token id, coordinate) was out of range.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Misuse of the tape, e.g. backward from a foreign variable.
    Tape(String),
    /// A runtime parameter was outside its domain (replacing rate, mask length).
    Param(String),
    /// A compression map that does not partition the predecessor layers.
    Map(String),
    /// Invalid model or run configuration.
    Config(String),
    /// Optimizer state inconsistent with the parameter set.
    State(String),
    /// Empty or malformed dataset.
    Data(String),
    /// Malformed file contents (checkpoint, TSV, config).
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, shapes } => {
                write!(f, "dimension error in {op}: shapes {shapes:?}")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Diverged { step, .. } => {
                write!(f, "numeric error: training loss diverged at step {step}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::Tape(msg) => write!(f, "tape error: {msg}"),
            Error::Param(msg) => write!(f, "parameter error: {msg}"),
            Error::Map(msg) => write!(f, "compression map error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::State(msg) => write!(f, "optimizer state error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub(crate) fn dim_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(Error::Dimension {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    })
}
