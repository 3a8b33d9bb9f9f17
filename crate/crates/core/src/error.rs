use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied parameters (model dims, defense knobs, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter layout mismatch: expected {expected} values, found {found}")]
    LayoutMismatch { expected: usize, found: usize },

    /// Returned by local training for a client without samples. The engine
    /// treats it as a signal to skip that client for the round.
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("defense `{defense}` removed every client update; nothing to aggregate")]
    EmptyAggregation { defense: String },

    #[error("operation requires a global model but none is available")]
    MissingGlobalModel,

    #[error("reconstruction diverged at iteration {iteration}: match loss {loss}")]
    ReconstructionDiverged { iteration: usize, loss: f64 },

    #[error("a {0} is already registered for this run")]
    SingletonViolation(&'static str),

    #[error("defender state file: {0}")]
    StateFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
