use thiserror::Error;
use tvbf_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("position {0:?} lies outside the room")]
    OutsideRoom([f64; 3]),
    #[error("reverberation time {t60} s cannot be realised in this room (reflection coefficient {beta_sq:.4} <= 0)")]
    InvalidReverb { t60: f64, beta_sq: f64 },
    #[error("undefined signal-to-noise ratio: {0}")]
    UndefinedSnr(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
