//! Error type shared by all toolkit modules.

use thiserror::Error;

/// Errors raised by the toolkit.
///
/// The variants are grouped so a driver can map them to exit codes:
/// data/shape/format problems versus genuine numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Input audio is shorter than one analysis frame.
    #[error("utterance too short: {samples} samples, need at least {needed}")]
    UtteranceTooShort { samples: usize, needed: usize },

    /// A voiced-frame selection came back empty.
    #[error("no speech frames")]
    NoSpeechFrames,

    /// Shapes of two inputs do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Not enough data to fit the requested model.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Labels, ids or table contents are unusable.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A decomposition or update lost positive-definiteness or became singular.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file did not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerics (as opposed to bad inputs or IO).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
