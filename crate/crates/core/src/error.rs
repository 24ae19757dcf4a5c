use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("monotonicity violated: {block} has eigenvalue {re} {sign} {im_abs}i with non-positive real part")]
    NotMonotone {
        block: &'static str,
        re: f64,
        sign: char,
        im_abs: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value at iteration {k}: {what}")]
    NonFinite { k: usize, what: &'static str },

    #[error("quantity unavailable: {0}")]
    Unavailable(&'static str),

    #[error("lemma inequality `{which}` violated at k = {k}: {lhs} > {rhs}")]
    LemmaViolation {
        which: &'static str,
        k: usize,
        lhs: f64,
        rhs: f64,
    },

    #[error("gain is not stabilizing (spectral radius {0} >= 1)")]
    NotStabilizing(f64),

    #[error("iteration did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("{0}")]
    Analysis(String),

    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
