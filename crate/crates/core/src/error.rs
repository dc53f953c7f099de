use crate::geom::Vec2;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid lattice spec: {0}")]
    InvalidSpec(String),

    #[error("site index {index} out of range for {len} sites")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error(
        "interpenetration between cluster sites {first} and {second}: distance {distance:.6} < {minimum:.6}"
    )]
    Configuration {
        first: usize,
        second: usize,
        distance: f64,
        minimum: f64,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("Taylor expansion of order {0} is not supported (only k = 2)")]
    UnsupportedOrder(u32),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("materialized domain radius {available:.3} is smaller than the required {required:.3}")]
    DomainTooSmall { required: f64, available: f64 },

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("optimization failed after {iterations} iterations: {message}")]
    Optimization {
        message: String,
        iterations: usize,
        last_iterate: Vec<Vec2>,
    },

    #[error("lattice fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
