//! Unsupervised generalist graph anomaly detection by prototype-guided
//! mixture-of-students distillation.
//!
//! A frozen self-supervised GCN teacher (plus a small trainable adapter) is
//! distilled into a mixture of students — one always-active shared branch and
//! a pool of sparsely routed personalized students — by matching soft
//! assignment distributions over learnable prototype codebooks. A
//! discrepancy-aware commitment/refinement objective keeps the teacher's
//! feature space anchored to the prototypes while the prototypes track
//! transferable structure. Scoring an unseen graph needs no retraining:
//! anomalies surface as distillation bias plus geometric deviation from the
//! codebooks.
//!
//! The `promos` binary exposes the full workflow: `gen-synthetic`, `inject`,
//! `pretrain`, `train`, `score`, `eval`, and `theorem-check`.

use std::path::PathBuf;

use thiserror::Error as ThisError;

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod graph;
pub mod inject;
pub mod kmeans;
pub mod metrics;
pub mod pipeline;
pub mod prototypes;
pub mod rng;
pub mod students;
pub mod synthetic;
pub mod teacher;
pub mod tensor;
pub mod unify;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },

    #[error("node/feature count mismatch: features.csv has {features} rows but the highest edge id is {max_id}")]
    CountMismatch { features: usize, max_id: usize },

    #[error("dangling node id {id} (graph has {n} nodes)")]
    DanglingNode { id: usize, n: usize },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("checkpoint version mismatch: file has version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
