use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Configuration problems and numerical failures are kept apart so that the
/// command-line driver can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("quadrature reached only {achieved:.3e} (requested {requested:.3e})")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("spectral node {node} (s = {s}): {source}")]
    Spectral {
        node: usize,
        s: f64,
        source: Box<Error>,
    },

    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by invalid input rather than numerical trouble.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain(_) | Error::Parameter(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
