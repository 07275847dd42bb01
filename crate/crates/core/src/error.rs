use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The element count cannot be split evenly by one of the partition factors.
    #[error("divisibility: {elements} elements not divisible by {factor} ({detail})")]
    Divisibility {
        elements: usize,
        factor: &'static str,
        detail: String,
    },

    #[error("missing shard {0}")]
    MissingShard(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("semi-loop requires an even number of devices, got {0}")]
    SemiLoopOddN(usize),

    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("malformed wire message: {0}")]
    Malformed(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

impl Error {
    /// True for errors caused by an unsupported shape or device count rather
    /// than malformed input.
    pub fn is_constraint(&self) -> bool {
        matches!(self, Error::Divisibility { .. } | Error::SemiLoopOddN(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
