//! Hybrid graph-convolution / selective-scan encoder for occlusion-robust
//! skeleton action recognition.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`nn`], [`gradcheck`] — dense numerics and a
//!   reverse-mode differentiation tape with a finite-difference checker.
//! - [`ssm`] — the selective state-space scan kernel: sequential reference,
//!   chunked parallel path, bidirectional composition.
//! - [`parts`] — part-wise and body-level joint scanning (per-frame spatial
//!   scans through independent per-part SSMs).
//! - [`fusion`] — learnable-topology aggregation and the gated fusion that
//!   combines part, body, graph-aware and gate streams.
//! - [`temporal`] — the unidirectional temporal scan block with sub-frame
//!   spatial-temporal reordering.
//! - [`model`], [`train`], [`checkpoint`], [`flops`] — the assembled
//!   network, the two-step training procedure, checkpoints, and an analytic
//!   cost estimator.
//! - [`data`], [`mask`], [`metrics`] — skeleton ingestion, the synthetic
//!   dataset, occlusion mask generators, and metrics records.

pub mod checkpoint;
pub mod data;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parts;
pub mod ssm;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use tape::{BoundParams, Gradients, Param, ParamId, ParamSet, Tape, Var};
pub use tensor::{Dtype, JointTensor, Scalar, Tensor};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or axis mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Value outside an operation's domain (e.g. non-positive step size).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid part partition (overlap, gap, empty part).
    #[error("partition error: {0}")]
    Partition(String),
    /// Bad configuration value or file.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed input data.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Recognized but unsupported input layout.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    /// Checkpoint serialization problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Non-finite value where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
