//! Sequential recommendation with decoupled side-information fusion.
//!
//! The crate bundles:
//! - `numcore`: a minimal f64 autodiff engine and numeric-rank utility,
//! - `dataset`: interaction-log ingestion, 5-core filtering, leave-one-out
//!   splits and batching,
//! - `attention`: early-fusion, non-invasive, and decoupled attention,
//! - `model`: the stacked encoder in its four variants,
//! - `train`: losses, Adam, and the training loop,
//! - `evaluation`: full-ranking Recall@K / NDCG@K,
//! - `diagnostics`: executable rank and gradient-flexibility checks.

pub mod error;
pub mod dataset;
pub mod numcore;

pub use error::{Error, Result};
