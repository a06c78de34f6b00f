//! Contextual-biasing toolkit for LLM-based speech recognition at desk
//! scale.
//!
//! The crate covers the full loop end to end: hotword vocabularies are
//! embedded and indexed for exact top-k retrieval, pruned by probing a
//! pluggable base recognizer, expanded with fuzzy variants, rendered into
//! bias prompts, decoded with (joint) beam search over pluggable token
//! scorers, scored with match/WER rewards plus group-relative advantages,
//! and evaluated with WER/KER/SACC/recall reports.

pub mod decoder;
pub mod embedder;
pub mod error;
pub mod grpo;
pub mod pipeline;
pub mod prompt;
pub mod rada;
pub mod retriever;
pub mod textmetrics;

pub use error::{Error, Result};
