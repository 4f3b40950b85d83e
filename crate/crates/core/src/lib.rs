//! Local prior matching for semi-supervised sequence transduction.
//!
//! The crate is `no_std` + `alloc`: every module is pure computation over
//! in-memory values. File formats, the command line and experiment
//! orchestration live in the `lpmlab` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decode;
pub mod error;
pub mod eval;
pub mod hash;
pub mod lm;
pub mod math;
pub mod ngram;
pub mod objectives;
pub mod rng;
pub mod seq2seq;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use lm::LanguageModel;
pub use rng::Rng;
pub use types::{TokenId, TokenSeq, Utterance, Vocab};
