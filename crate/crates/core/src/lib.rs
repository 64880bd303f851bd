//! Decoder-only transformer inference with pluggable attention modes over
//! prompts made of interchangeable documents.
//!
//! The default runtime path is deterministic: every kernel reduces in a
//! fixed order, and PINE-family attention reduces keys in an order that does
//! not depend on how documents were arranged in the input. Shuffling the
//! documents of a prompt therefore leaves PINE outputs bitwise unchanged.

pub mod error;
pub mod harness;
pub mod model;
pub mod modes;
pub mod oracle;
pub mod pine;
pub mod prompt;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{GenerationParams, KvCache, Model, ModelConfig, Weights};
pub use modes::{Aggregation, AttentionMode, Variant};
pub use prompt::{SegmentedPrompt, SequenceLayout, Tokenizer};
pub use tensor::Tensor;
