//! Fine-grained preference optimization lab.
//!
//! A toy autoregressive token model, a synthetic text-to-token task with
//! injectable segmental errors, composite scoring and pair selection,
//! alignment-based error localization, and masked (token-level) versus
//! utterance-level preference losses with their trainers.

pub mod annotate;
pub mod error;
pub mod evalrep;
pub mod model;
pub mod optimloss;
pub mod pipeline;
pub mod records;
pub mod rng;
pub mod scoring;
pub mod seq;
pub mod task;

pub use error::{Error, Result};
pub use seq::{GenSample, SampleMeta, TokenId, TokenSeq, BOS, EOS, PAD};
