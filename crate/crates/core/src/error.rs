use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}; expected 2 or 3")]
    Dimension(usize),
    #[error("point lies outside the closed unit ball (|x| = {0})")]
    OutsideDomain(f64),
    #[error("need at least 4 boundary points, got {0}")]
    TooFewPoints(usize),
    #[error("coincident points: direction undefined")]
    CoincidentPoints,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{0} is not available for n = {1}")]
    Unsupported(&'static str, usize),
    #[error("memory budget exceeded: need {required} bytes, budget {budget} bytes ({detail})")]
    MemoryBudget { required: usize, budget: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("data mismatch: {0}")]
    Mismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
