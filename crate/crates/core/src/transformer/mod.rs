//! Toy multi-head decoder hosting the token filter ahead of every attention
//! sublayer.

mod cache;
mod config;
mod model;
mod session;
mod weights;

pub use cache::KvCache;
pub use config::ModelConfig;
pub use model::{Heads, Model};
pub use session::{decode, BlockMode, BlockOutput, DecodeOutput, Phase, Session};
pub use weights::{LayerWeights, Weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
