use thiserror::Error;

/// Error type shared across the crate.
///
/// The variants split along the CLI's exit codes: `Usage`, `Config`, `Io` and
/// `Parse` are caller mistakes, the rest are numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("fitting error: {0}")]
    Fitting(String),

    #[error("fluctuation did not converge after {iterations} iterations (last score residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("fluctuation separation: {0}")]
    Separation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unit {unit}: {source}")]
    AtUnit {
        unit: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_unit(self, unit: usize) -> Self {
        Error::AtUnit { unit, source: Box::new(self) }
    }

    /// True for errors caused by bad input rather than numerics.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Parse { .. } | Error::Io(_) => true,
            Error::AtUnit { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
