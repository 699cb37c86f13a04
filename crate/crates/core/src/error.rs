use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid teacher: {0}")]
    InvalidTeacher(String),

    #[error("summarization for region `{region}` is not surjective: event {event} is never produced")]
    NonSurjective { region: String, event: usize },

    #[error("leaf prior is not a probability distribution: {0}")]
    NonStochasticPrior(String),

    #[error("region graph contains a cycle through `{0}`")]
    Cyclic(String),

    #[error("enumeration of {required} configurations exceeds the cap of {cap}")]
    CapExceeded { required: u128, cap: u64 },

    #[error("event {event} of region `{region}` has zero probability")]
    ZeroPrior { region: String, event: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing state: {0}")]
    MissingState(String),

    #[error("batch norm is undefined for a constant input (sigma = 0)")]
    ZeroVariance,

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix is not all-vert: row {row} of table ({parent} <- {child}) is not a vertex")]
    NotAllVert {
        parent: String,
        child: String,
        row: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
