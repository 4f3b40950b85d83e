use alloc::string::String;
use core::fmt;

/// Errors raised by the core library. The `Display` form names the module the
/// failure originated in so operator-facing messages are attributable.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Every log-weight was `-inf`, so no distribution can be formed.
    DegenerateSupport,
    InvalidVocab(String),
    InvalidTokenSeq(String),
    InvalidUtterance(String),
    /// The generator could not produce sentences within the length cap.
    RejectionRate { rejected: u64, attempts: u64 },
    InvalidCorpusSpec(String),
    EnumerationTooLarge { count: u128, limit: u128 },
    InvalidLm(String),
    InvalidModel(String),
    NonFiniteActivation { step: usize },
    NonFiniteGradient { tensor: &'static str },
    ShapeMismatch { expected: usize, found: usize },
    InvalidDecode(String),
    MissingGold(String),
    EmptyReference,
    DegenerateWerr,
    InvalidSchedule,
    InvalidConfig(String),
    NonFiniteLoss { step: usize, batch: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateSupport => {
                write!(f, "core: all log-weights are -inf (degenerate support)")
            }
            Error::InvalidVocab(m) => write!(f, "core: invalid vocabulary: {m}"),
            Error::InvalidTokenSeq(m) => write!(f, "core: invalid token sequence: {m}"),
            Error::InvalidUtterance(m) => write!(f, "core: invalid utterance: {m}"),
            Error::RejectionRate { rejected, attempts } => write!(
                f,
                "synth: rejected {rejected} of {attempts} sampled sentences as too long; \
                 respecify the language model so sentences terminate within max_len"
            ),
            Error::InvalidCorpusSpec(m) => write!(f, "synth: {m}"),
            Error::EnumerationTooLarge { count, limit } => write!(
                f,
                "synth: exact posterior would enumerate {count} sequences (limit {limit})"
            ),
            Error::InvalidLm(m) => write!(f, "ngram_lm: {m}"),
            Error::InvalidModel(m) => write!(f, "seq2seq: {m}"),
            Error::NonFiniteActivation { step } => {
                write!(f, "seq2seq: non-finite activation at decoder step {step}")
            }
            Error::NonFiniteGradient { tensor } => {
                write!(f, "seq2seq: non-finite gradient in tensor `{tensor}`")
            }
            Error::ShapeMismatch { expected, found } => write!(
                f,
                "seq2seq: parameter shape mismatch (expected {expected} values, found {found})"
            ),
            Error::InvalidDecode(m) => write!(f, "decode: {m}"),
            Error::MissingGold(id) => {
                write!(f, "decode: oracle reference length requested but utterance `{id}` has no gold")
            }
            Error::EmptyReference => write!(f, "eval: reference sequence is empty"),
            Error::DegenerateWerr => {
                write!(f, "eval: low- and high-resource WERs are equal; WERR is undefined")
            }
            Error::InvalidSchedule => write!(f, "trainer: mixing ratio 0:0 is not a schedule"),
            Error::InvalidConfig(m) => write!(f, "trainer: {m}"),
            Error::NonFiniteLoss { step, batch } => {
                write!(f, "trainer: non-finite loss at step {step} (batch {batch})")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
