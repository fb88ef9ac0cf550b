//! Sequential recommendation with contextual inference of tail-item
//! embeddings.
//!
//! The crate pre-trains a GRU or self-attention recommender, fits an
//! embedding-inference function that reproduces head-item embeddings from
//! the contexts they are consumed in, and uses it to replace the poorly
//! trained embeddings of tail and new items without touching any other
//! parameter.

pub mod dataset;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synthetic;
pub mod tailinfer;
