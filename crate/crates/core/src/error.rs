use thiserror::Error;

/// Errors raised by envelope construction, impairment stages, metrics and calibrations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: f64, right: f64 },

    #[error("record too short: {0}")]
    TooShort(String),

    #[error("delay of {delay:e} s exceeds a quarter of the {duration:e} s record")]
    DelayTooLarge { delay: f64, duration: f64 },

    #[error("operator is not unitary (deviation {0:e})")]
    NonUnitary(f64),

    #[error("stage `{0}` carries no budget term")]
    UntaggedStage(String),

    #[error("equalizer diverged: {0}")]
    Divergence(String),

    #[error("carrier not found: {0}")]
    CarrierNotFound(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("output error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
