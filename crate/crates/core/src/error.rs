use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("path parameter {theta} outside segment domain [0, {t_end}]")]
    ThetaOutOfDomain { theta: f64, t_end: f64 },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("demonstrator failed: every restart produced a non-finite rollout")]
    DemonstratorFailed,

    #[error("a condition (d) counterexample needs a demonstrated input")]
    MissingDemonstration,

    #[error("LP solver failure: {0}")]
    Lp(String),

    #[error("{0}")]
    NoTraces(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
