//! Generative named-entity recognition at desk scale.
//!
//! Entities, whether flat, nested, or discontinuous, are linearized into
//! pointer-index sequences, generated autoregressively by a small
//! encoder-decoder with a pointer head, and decoded back into spans.
//!
//! The pipeline:
//!
//! ```text
//! corpus ──► tokenizer ──► linearizer ──► model ◄── trainer
//!                              ▲            │
//!                              │            ▼
//!                          metrics ◄──  generator
//! ```
//!
//! Everything is f64 and deterministic given a seed: training, generation,
//! and all file outputs are byte-reproducible on the same platform.

pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod generator;
pub mod linearizer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{Dataset, Entity, RawSentence};
pub use linearizer::{Scheme, TargetSequence};
pub use model::{ModelConfig, PointerModel};
pub use tokenizer::{BpeVocab, TokenizedSentence};
