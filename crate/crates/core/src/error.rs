use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} spins, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("{n_spins} spins exceeds the enumeration ceiling of {ceiling}")]
    Capacity { n_spins: usize, ceiling: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(
        "fixed-point iteration did not converge after {iterations} iterations \
         (last q = {last_q}, residual {residual:e})"
    )]
    NoConvergence {
        iterations: usize,
        last_q: f64,
        residual: f64,
    },

    #[error("local-field cache diverged from recomputation by {deviation:e}")]
    CacheIntegrity { deviation: f64 },

    #[error("series too short: {len} samples cannot form {batches} batches")]
    SeriesTooShort { len: usize, batches: usize },

    #[error("disorder {index}: {source}")]
    AtDisorder {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Capacity { .. } => "capacity",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Unsupported(_) => "unsupported",
            Error::NoConvergence { .. } => "no_convergence",
            Error::CacheIntegrity { .. } => "cache_integrity",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::AtDisorder { source, .. } => source.kind(),
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn at_disorder(index: usize, source: Error) -> Self {
        Error::AtDisorder {
            index,
            source: Box::new(source),
        }
    }
}
