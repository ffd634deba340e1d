use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("krum requires n >= 2f + 3, got n = {n}, f = {f}")]
    KrumCondition { n: usize, f: usize },

    #[error("trimmed mean with beta = {beta} leaves no aggregand out of {n}")]
    EverythingTrimmed { n: usize, beta: f64 },

    #[error("secure aggregation: client {0} is not in the cohort")]
    UnknownClient(usize),

    #[error("secure aggregation: client {0} already committed")]
    DoubleCommit(usize),

    #[error("secure aggregation: duplicate client id {0} in cohort")]
    DuplicateClient(usize),

    #[error("secure aggregation: {0}")]
    SecAgg(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch} (client {client})")]
    NonFiniteLoss { client: usize, epoch: usize, batch: usize },

    #[error("adversary: {0}")]
    Attack(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round { round, source: Box::new(e) },
        }
    }
}
