use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with inputs that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("token sequence mismatch: {0}")]
    Mismatch(String),

    #[error("histograms use incompatible binning: {0}")]
    Binning(String),

    #[error("reweighting did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("enumeration needs {required} sequences, above the cap of {cap}")]
    EnumerationCap { required: u128, cap: u64 },

    #[error("models share no band overlap under current sampling ({0}); widen Z or sample more")]
    NoOverlap(String),

    #[error("artifact fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
