use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),
    /// Inputs do not agree on shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A forward pass produced a NaN or infinite value.
    #[error("non-finite value produced by layer {layer} ({kind})")]
    Numeric { layer: usize, kind: &'static str },
    /// A bit string or codeword does not have a valid layout.
    #[error("format error: {0}")]
    Format(String),
    /// Experiment or budget settings that cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),
    /// A protection or locking plan is inconsistent with the model.
    #[error("plan error: {0}")]
    Plan(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn plan(msg: impl Into<String>) -> Self {
        Error::Plan(msg.into())
    }
}
