//! Fault diagnosis on multivariate sensor data with graph neural networks
//! whose adjacency matrices are learned during training.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`] — dense f64 tensors with a reverse-mode tape and Adam
//! - [`graph`] — adjacency construction (trainable variants, correlation,
//!   import/export), top-k sparsification, degree normalization
//! - [`models`] — the two-layer GCN classifier with min read-outs, the
//!   multi-module ensemble, and MLP/1DCNN baselines
//! - [`data`] — run ingestion, standard-score normalization, windowing,
//!   run-level splits, and a synthetic process generator with a known
//!   ground-truth graph
//! - [`eval`] — per-fault TPR/FPR, detection TPR/FPR, average detection
//!   delay, node importance, and graph-recovery scoring

pub mod data;
pub mod eval;
pub mod graph;
pub mod models;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
