use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigKeys(Vec<String>),

    #[error("{what} = {value} out of range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("numerically degenerate: {0}")]
    NumericallyDegenerate(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("non-finite state while sampling at t = {t}")]
    Sampling { t: usize },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("incomplete trajectory: expected {expected} transitions, found {found}")]
    IncompleteTrajectory { expected: usize, found: usize },

    #[error("rewards already assigned to this trajectory")]
    RewardAlreadyAssigned,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, detail: impl ToString) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.to_string(),
        }
    }
}

pub(crate) fn check_range(what: &'static str, value: usize, min: usize, max: usize) -> Result<()> {
    if value < min || value > max {
        return Err(Error::OutOfRange {
            what,
            value: value as i64,
            min: min as i64,
            max: max as i64,
        });
    }
    Ok(())
}
