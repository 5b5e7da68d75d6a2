use thiserror::Error;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A CTC alignment does not exist for the given label/frame lengths.
    /// Raised eagerly so data bugs surface instead of training on +inf.
    #[error("CTC infeasible: {frames} frames cannot carry {required} required label slots")]
    CtcInfeasible { frames: usize, required: usize },

    #[error("oracle instance too large: {0}")]
    OracleTooLarge(String),

    #[error("input too short: {0}")]
    TooShortInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("io error on {path}: {source}")]
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

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
