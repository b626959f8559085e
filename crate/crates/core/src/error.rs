use thiserror::Error;

pub type Result<T, E = KvnError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvnError {
    #[error("point at depth {depth} is not in front of the camera")]
    BehindCamera { depth: f64 },

    #[error("value {value} outside of the admissible domain {domain}")]
    DomainError { value: f64, domain: &'static str },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeError { expected: String, actual: String },

    #[error("no valid hypotheses{}", context_suffix(.context))]
    NoValidHypotheses { context: String },

    #[error("insufficient support: {eligible} eligible pixels, at least {required} required")]
    InsufficientSupport { eligible: usize, required: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("bad initialization: {0}")]
    BadInitialization(String),

    #[error("insufficient observations: {found} found, at least {required} required")]
    InsufficientObservations { found: usize, required: usize },

    #[error("insufficient points: requested {requested}, only {available} available")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed data: {0}")]
    Format(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl KvnError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        KvnError::InvalidInput(msg.into())
    }

    pub fn no_hypotheses(context: impl Into<String>) -> Self {
        KvnError::NoValidHypotheses {
            context: context.into(),
        }
    }

    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        KvnError::ShapeError {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

impl From<std::io::Error> for KvnError {
    fn from(err: std::io::Error) -> Self {
        KvnError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for KvnError {
    fn from(err: serde_json::Error) -> Self {
        KvnError::Format(err.to_string())
    }
}
