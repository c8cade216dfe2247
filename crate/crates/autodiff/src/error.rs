use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("node {0} is an input or parameter with no bound value")]
    Unbound(usize),

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("node {0} is not an input or parameter and cannot be bound")]
    NotBindable(usize),

    #[error("no parameter named `{0}` in the graph")]
    UnknownParameter(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("non-finite gradient in parameter `{name}` (entry {index})")]
    NonFiniteGradient { name: String, index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
