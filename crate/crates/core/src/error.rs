use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the fine-tuning engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes cannot be combined by the requested operation.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Invalid runtime input (labels out of range, empty dataset, ...).
    Input(String),
    /// API misuse, e.g. backward from a non-scalar node.
    Usage(String),
    /// Invalid configuration value.
    Config(String),
    /// Budget or candidate-set problem during mask selection.
    Selection(String),
    /// Malformed sparse or dense checkpoint stream.
    Format {
        offset: usize,
        block: Option<String>,
        message: String,
    },
    /// A value does not fit in the fixed-width checkpoint fields.
    Capacity(String),
    /// A checkpoint does not match the model it is applied to.
    Apply {
        tensor: String,
        index: Option<(u64, u64)>,
        message: String,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            block: None,
            message: message.into(),
        }
    }

    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "dimension error in {op}: {left:?} vs {right:?}")
            }
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Selection(msg) => write!(f, "selection error: {msg}"),
            Error::Format {
                offset,
                block,
                message,
            } => match block {
                Some(name) => write!(
                    f,
                    "format error at byte {offset} in block '{name}': {message}"
                ),
                None => write!(f, "format error at byte {offset}: {message}"),
            },
            Error::Capacity(msg) => write!(f, "capacity error: {msg}"),
            Error::Apply {
                tensor,
                index,
                message,
            } => match index {
                Some((row, col)) => write!(
                    f,
                    "cannot apply entry ({row}, {col}) to tensor '{tensor}': {message}"
                ),
                None => write!(f, "cannot apply to tensor '{tensor}': {message}"),
            },
        }
    }
}

impl std::error::Error for Error {}
