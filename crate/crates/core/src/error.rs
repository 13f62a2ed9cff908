use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid attention mask: {0}")]
    InvalidMask(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("buffer integrity: {0}")]
    BufferIntegrity(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
