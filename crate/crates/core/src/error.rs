//! Error types shared across the crate.
//!
//! Every constructor takes the reporting module's name so messages read
//! `module: what went wrong`. The CLI maps variants onto process exit codes
//! (validation/invariant failures vs. numeric failures).

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, VifError>;

#[derive(Debug)]
pub enum VifError {
    /// Dimension/shape mismatch between tensors or spans.
    Shape(String),
    /// Input outside an operation's mathematical domain (log of nonpositive,
    /// division by zero, ...).
    Domain(String),
    /// A documented precondition or invariant was violated by the caller.
    Contract(String),
    /// NaN/Inf or other numeric breakdown detected.
    Numeric(String),
    /// Token-span layout inconsistent with the data it describes.
    Layout(String),
    /// Malformed binary or text artifact; `offset` is the byte position at
    /// which parsing failed.
    Format { msg: String, offset: u64 },
    /// Bad configuration key/value.
    Config(String),
    /// Invalid layer patch plan.
    Plan(String),
    /// Token id outside the vocabulary.
    Vocab(String),
    Io(std::io::Error),
}

impl VifError {
    pub fn shape(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Shape(format!("{module}: {msg}"))
    }
    pub fn domain(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Domain(format!("{module}: {msg}"))
    }
    pub fn contract(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Contract(format!("{module}: {msg}"))
    }
    pub fn numeric(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Numeric(format!("{module}: {msg}"))
    }
    pub fn layout(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Layout(format!("{module}: {msg}"))
    }
    pub fn format(module: &str, msg: impl fmt::Display, offset: u64) -> Self {
        VifError::Format { msg: format!("{module}: {msg}"), offset }
    }
    pub fn config(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Config(format!("{module}: {msg}"))
    }
    pub fn plan(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Plan(format!("{module}: {msg}"))
    }
    pub fn vocab(module: &str, msg: impl fmt::Display) -> Self {
        VifError::Vocab(format!("{module}: {msg}"))
    }

    /// True for errors that indicate numeric breakdown rather than a
    /// validation failure (the CLI exits 3 instead of 2 for these).
    pub fn is_numeric(&self) -> bool {
        matches!(self, VifError::Numeric(_))
    }
}

impl fmt::Display for VifError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VifError::Shape(m) => write!(f, "shape error: {m}"),
            VifError::Domain(m) => write!(f, "domain error: {m}"),
            VifError::Contract(m) => write!(f, "contract error: {m}"),
            VifError::Numeric(m) => write!(f, "numeric error: {m}"),
            VifError::Layout(m) => write!(f, "layout error: {m}"),
            VifError::Format { msg, offset } => {
                write!(f, "format error at byte {offset}: {msg}")
            }
            VifError::Config(m) => write!(f, "config error: {m}"),
            VifError::Plan(m) => write!(f, "plan error: {m}"),
            VifError::Vocab(m) => write!(f, "vocab error: {m}"),
            VifError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for VifError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            VifError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for VifError {
    fn from(e: std::io::Error) -> Self {
        VifError::Io(e)
    }
}
