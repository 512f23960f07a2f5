use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("frame is not an exact render of any state")]
    NotAValidRender,

    #[error("state space exceeds capacity of {limit} states")]
    Capacity { limit: usize },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("history window not warm: {0}")]
    Warmup(String),

    #[error("frame has zero total mass")]
    DegenerateMass,

    #[error("clean statistics are degenerate: {0}")]
    DegenerateStats(String),

    #[error("training did not reach its target: {message}")]
    Training { message: String, curve: Vec<f64> },

    #[error("non-finite value in {0}")]
    Numerics(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Nn(#[from] nnkit::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
