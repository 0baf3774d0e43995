use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cell {cell:?} is outside level {level} grid of shape {shape:?}")]
    OutOfRange {
        level: usize,
        cell: Vec<usize>,
        shape: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("could not place {requested} instances after {attempts} attempts")]
    Capacity { requested: usize, attempts: usize },

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("input: {0}")]
    Input(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
