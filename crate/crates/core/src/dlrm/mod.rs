//! A small DLRM: per-table embeddings, a bottom MLP for dense features,
//! pairwise dot-product interaction and a top MLP producing a click
//! probability. Forward, backward and SGD are written out explicitly.

mod config;
mod model;
mod params;

pub use config::DlrmConfig;
pub use model::{backward, bce_loss, evaluate, forward, ForwardCache, Record, BCE_EPSILON};
pub use params::{init_params, sgd_apply, EmbeddingTable, GradientDelta, Linear, ModelParams, Scalar, SparseRowGrad};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DlrmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sparse index {index} out of range for table {table} (vocab {vocab})")]
    Index { table: usize, index: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache was built for params version {cache}, params are at version {params}")]
    Cache { cache: u64, params: u64 },
}
