use thiserror::Error;

/// Errors raised while building or advancing the slice model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("unsupported space: {0}")]
    UnsupportedSpace(String),

    #[error("field lives on {found} but {expected} was expected")]
    SpaceMismatch { expected: String, found: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("breeding did not reach max|v| = {threshold} m/s within {days} days (reached {reached:.4} m/s)")]
    BreedingCap {
        threshold: f64,
        days: f64,
        reached: f64,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
