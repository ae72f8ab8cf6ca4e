use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("pose graph: {0}")]
    Graph(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("observation references unknown keyframe node {0}")]
    Stale(u32),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
