use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("block {start}..={end} is not a contiguous range of the vine order")]
    UnsupportedBlock { start: usize, end: usize },

    #[error("coalition {0:#b} is neither a prefix nor a suffix of the vine order")]
    UnsupportedCoalition(u64),

    #[error("coalition {0:#b} is not covered by the cover plan")]
    PlanCoverage(u64),

    #[error("{0} features exceed the exact-enumeration limit of {1}")]
    TooManyFeatures(usize, usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("predictor failed: {0}")]
    Predictor(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("repetition {repetition}, {method}: {source}")]
    Experiment {
        repetition: usize,
        method: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
