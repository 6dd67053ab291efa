use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    RootNotScalar { shape: Vec<usize> },

    #[error("double backward requires a recorded first backward pass")]
    BackwardNotRecorded,

    #[error("infinite divergence: P[{index}] > 0 but Q[{index}] == 0")]
    InfiniteDivergence { index: usize },

    #[error("infinite loss: probability of class {class} is zero")]
    InfiniteLoss { class: usize },

    #[error("class index {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("not a probability vector: {detail}")]
    InvalidDistribution { detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient at example {example_index}")]
    NonFiniteGradient { example_index: usize },

    #[error("unknown method `{got}`; valid methods are {valid}")]
    UnknownMethod { got: String, valid: &'static str },

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("instance too large for grid oracle: n = {n}, limit is 3")]
    GridTooLarge { n: usize },

    #[error("config error in {path}: {detail}")]
    Config { path: String, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
