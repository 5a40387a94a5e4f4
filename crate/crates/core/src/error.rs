use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("feature `{feature}`: value {value} outside [{lb}, {ub}]")]
    OutOfBounds {
        feature: String,
        value: String,
        lb: f64,
        ub: f64,
    },

    #[error("feature `{feature}`: unknown level `{level}`")]
    UnknownLevel { feature: String, level: String },

    #[error("feature `{feature}`: {reason}")]
    BadValue { feature: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid SPN: {}", .0.join("; "))]
    InvalidSpn(Vec<String>),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("network fingerprint {found} does not match schema fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("formulation error: {0}")]
    Formulation(String),

    #[error("oracle grid has {size} points, cap is {cap}")]
    GridTooLarge { size: u128, cap: u128 },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
