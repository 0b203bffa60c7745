use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter arity mismatch: model expects {expected} values, got {got}")]
    ParameterArity { expected: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("exact box search refused: n = {n} exceeds the cap of {cap} for d = {d}")]
    SizeCap { n: usize, cap: usize, d: usize },

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("singular local fit (effective n = {effective_n})")]
    SingularFit { effective_n: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("grid does not bracket the boundary: {0}")]
    Bracket(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
