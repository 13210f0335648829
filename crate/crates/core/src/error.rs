use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient frames: need at least 2, got {0}")]
    InsufficientFrames(usize),

    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),

    #[error("rank {rank} out of bounds for {channels} channels")]
    RankOutOfBounds { rank: usize, channels: usize },

    #[error("negative argument: {0}")]
    NegativeArgument(f64),

    #[error("degenerate update at bin {0}")]
    DegenerateUpdate(usize),

    #[error("degenerate output power at bin {0}")]
    DegenerateOutputPower(usize),

    #[error("reference microphone {ref_mic} out of range for {channels} channels")]
    RefMicOutOfRange { ref_mic: usize, channels: usize },

    #[error("need ≥ 2 channels, got {0}")]
    TooFewChannels(usize),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate target: reference signal is all zeros")]
    DegenerateTarget,

    #[error("empty report list")]
    EmptyReports,

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
