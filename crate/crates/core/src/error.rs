use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ulp-of-nonfinite: code {code:#06x} is not a finite value")]
    UlpOfNonFinite { code: u16 },

    #[error("split-nonfinite: cannot split {value}")]
    SplitNonFinite { value: f32 },

    #[error("invalid-correction-code: {code} is outside [-{max}, {max}]")]
    InvalidCorrectionCode { code: i32, max: i32 },

    #[error("quantize-nonfinite: element {index} is {value}")]
    QuantizeNonFinite { index: usize, value: f32 },

    #[error("scale-overflow: group absmax {absmax} exceeds the largest FP16 scale")]
    ScaleOverflow { absmax: f32 },

    #[error("negative-variance: element {index} is {value}")]
    NegativeVariance { index: usize, value: f32 },

    #[error("kind-mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid-state-code: {0}")]
    InvalidStateCode(String),

    #[error("nmse-undefined: reference buffer is all zeros")]
    NmseUndefined,

    #[error("length-mismatch: expected {expected} elements, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("nonfinite-gradient: element {index} is {value}")]
    NonFiniteGradient { index: usize, value: f32 },

    #[error("invalid-hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("invalid-config: {0}")]
    InvalidConfig(String),

    #[error("empty-trajectory: no state snapshots recorded")]
    EmptyTrajectory,

    #[error("bad-magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported-version: {0}")]
    UnsupportedVersion(u16),

    #[error("crc-mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated: checkpoint ends early")]
    Truncated,

    #[error("malformed-checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
