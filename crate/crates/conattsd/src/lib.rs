//! Sarcasm detection over multimodal conversation features.
//!
//! The model consumes precomputed per-utterance feature vectors for three
//! channels (text, audio, vision), encodes each channel's conversational
//! context with a dual global/speaker GRU recurrence refined by a Transformer
//! stack, contrasts the channels with an opponent-attention mechanism, and
//! classifies each utterance from the fused representation.
//!
//! Everything runs on the crate's own reverse-mode gradient tape, with a
//! finite-difference oracle for verification and a deterministic Adam
//! training loop.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod tensor;

pub use error::{Error, Result};
