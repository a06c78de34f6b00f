use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("reference transcript is empty")]
    EmptyReference,

    #[error("length mismatch: {refs} references vs {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("text is empty after normalization: {0:?}")]
    EmptyText(String),

    #[error("cannot normalize an all-zero vector")]
    ZeroVector,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("subsample factor must be at least 1")]
    ZeroFactor,

    #[error("invalid frame rate: {0}")]
    InvalidFrameRate(f64),

    #[error("k must be at least 1")]
    InvalidK,

    #[error("duplicate hotword id {0:?}")]
    DuplicateId(String),

    #[error("duplicate hotword surface {0:?} after normalization")]
    DuplicateSurface(String),

    #[error("unknown hotword id {0:?}")]
    UnknownId(String),

    #[error("embedding failed for hotword {id:?}: {source}")]
    EntryEmbedding {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing synth spec for hotword {0:?}")]
    MissingSpec(String),

    #[error("carrier sentence for hotword {id:?} does not contain its surface: {carrier:?}")]
    BadCarrier { id: String, carrier: String },

    #[error("hotword {0:?} contains a prompt delimiter character")]
    DelimiterInHotword(String),

    #[error("advantage group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("log-probability above zero in {0}")]
    PositiveLogProb(&'static str),

    #[error("scorer distribution sums to {sum} under prompt {prompt:?}")]
    UnnormalizedScorer { prompt: String, sum: f64 },

    #[error("scorer emitted token {0:?} outside its vocabulary")]
    TokenOutsideVocab(String),

    #[error("invalid beam config: {0}")]
    InvalidBeamConfig(&'static str),

    #[error("encoder fingerprint mismatch: index has {index:#018x}, encoder has {encoder:#018x}")]
    FingerprintMismatch { index: u64, encoder: u64 },

    #[error("bad index file: {0}")]
    BadIndexFile(String),

    #[error("utterance {0:?} has no keywords; retrieval evaluation requires at least one")]
    KeywordlessUtterance(String),

    #[error("invalid utterance {id:?}: {reason}")]
    InvalidUtterance { id: String, reason: String },

    #[error("parse error at line {line}: {msg}")]
    LineParse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown manifest set {0:?}")]
    UnknownSet(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The outermost stage tag, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
