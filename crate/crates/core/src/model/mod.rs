//! Llama-style decoder: RMS norm, rotary embeddings, grouped-query
//! attention and a SwiGLU feed-forward block.

mod cache;
mod config;
mod container;
mod rope;
mod runtime;
mod weights;

pub use cache::KvCache;
pub use config::ModelConfig;
pub use container::{load_weights, save_weights, weights_from_bytes, weights_to_bytes};
pub use rope::{apply_rope, Rope};
pub use runtime::{argmax, Generation, GenerationParams, Model};
pub use weights::{init_random, LayerWeights, Weights, INIT_STD};
