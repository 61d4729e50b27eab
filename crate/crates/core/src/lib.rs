//! Prosody-driven intent tagging for spoken robot instructions.
//!
//! The pipeline: extract per-word prosodic/acoustic features from aligned
//! audio, fuse them with text embeddings, tag each word as O / GOAL /
//! DETAIL with a BiLSTM or Transformer encoder-decoder, then hand the
//! tagged transcript to an LLM head that picks between two candidate task
//! plans. A synthetic ambiguous-instruction corpus generator makes the
//! whole loop runnable offline.

pub mod autodiff;
pub mod corpus;
pub mod embed;
pub mod llm;
pub mod model;
pub mod speech;
pub mod train;
