//! Audits code-completion backends for memorized hard-coded credentials.
//!
//! The pipeline scans a local code corpus for secrets, builds redacted
//! prompts around each first occurrence, queries a pluggable completion
//! backend, pushes the outputs through a four-stage plausibility cascade
//! (regex, entropy, pattern, word), classifies strong/weak memorization
//! against a corpus index, and emits metrics plus rank-sum statistics over
//! context features.

pub mod analysis;
pub mod filters;
pub mod gateway;
pub mod pipeline;
pub mod prober;
pub mod prompt;
pub mod registry;
pub mod scanner;
pub mod stats;
pub mod tokenizer;
