use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its precondition. `key` is the dotted
    /// config path (e.g. `bridge.alpha`).
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at timestep {t:?} (magnitude {magnitude})")]
    Numerical { t: Option<usize>, magnitude: f64 },

    #[error("sampling failed at grid step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fixed-point inversion did not converge at grid step {step} (residual {residual:e})")]
    NonConvergence { step: usize, residual: f64 },

    #[error("{branch} inversion branch failed: {source}")]
    Branch {
        branch: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("bad clip file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }

    /// True for errors that stem from user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Json(_))
    }
}
