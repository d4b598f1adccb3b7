use thiserror::Error;

/// Errors raised by the laboratory.
///
/// The variants are grouped so that the command-line runner can map them to
/// exit codes: configuration and hypothesis failures are distinguished from
/// numerical breakdowns.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The model has no computable index function.
    #[error("unsupported model `{0}`: {1}")]
    UnsupportedModel(String, String),

    /// A quadrature did not reach the requested tolerance.
    #[error("quadrature did not converge: requested {requested:e}, achieved {achieved:e}")]
    Quadrature { requested: f64, achieved: f64 },

    /// A simulated path produced a non-finite state.
    #[error("simulation diverged at t = {time}: {detail}")]
    Simulation { time: f64, detail: String },

    /// A per-path failure inside an ensemble.
    #[error("path {index}: {source}")]
    Path {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// The Girsanov-forced pair failed to meet before the horizon.
    #[error("forced coupling missed the horizon {horizon} (final distance {distance:e}) after {attempts} attempts")]
    CouplingMissed {
        horizon: f64,
        distance: f64,
        attempts: usize,
    },

    /// The hypothesis of a theorem check does not hold for the model.
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    /// Bad configuration value; carries the field path.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// I/O failure while reading inputs or writing artifacts.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_path(self, index: usize) -> Self {
        Error::Path {
            index,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
