use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value {value} outside the domain of {what}")]
    OutOfDomain { what: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gram matrix of {rows}x{cols} needs {bytes} bytes, above the cap of {cap} bytes")]
    Capacity {
        rows: usize,
        cols: usize,
        bytes: usize,
        cap: usize,
    },

    #[error("non-finite objective at sample {index}")]
    NonFinite { index: usize },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("degenerate density: total mass {mass:e}")]
    DegenerateDensity { mass: f64 },

    #[error("unstable integration: {0}")]
    Unstable(String),

    #[error("flow step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
