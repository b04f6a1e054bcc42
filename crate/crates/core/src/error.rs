use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state diverged at t = {t:.3} s (|entry| > {bound})")]
    Diverged { t: f64, bound: f64 },

    #[error(
        "admissible set is empty: box minimum {box_min:.6e} exceeds half-space bound {rhs:.6e}"
    )]
    EmptyAdmissibleSet { box_min: f64, rhs: f64 },

    #[error("insufficient history: need {needed} steps before index {index}, have {available}")]
    InsufficientHistory {
        needed: usize,
        available: usize,
        index: usize,
    },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("matrix is zero")]
    ZeroMatrix,

    #[error("residual is zero")]
    ZeroResidual,

    #[error(
        "eigen-iteration did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular design matrix in regression")]
    SingularDesign,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("schema mismatch in {path}: {reason}")]
    SchemaMismatch { path: String, reason: String },

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
