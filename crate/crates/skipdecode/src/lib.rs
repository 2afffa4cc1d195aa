//! A desk-scale decoder-only transformer inference engine built around a
//! budgeted layer-skipping decode policy.
//!
//! The engine decodes batches column-wise: at each sequence position every
//! batch row executes the same set of decoder layers, and the number of
//! executed layers decays monotonically with position. Because later tokens
//! never run deeper than earlier ones, every key/value a token needs is
//! already cached, and the per-run compute budget is bounded in advance.
//!
//! Modules:
//! - [`tensor`]: dense 2-D kernels (matmul, row softmax, layer norm, GELU)
//!   generic over `f32`/`f64`.
//! - [`schedule`]: the per-position exit-budget policy, active-layer sets,
//!   and the speedup preset table.
//! - [`kvcache`]: per-(layer, position) key/value store with presence
//!   tracking and recompute/backfill counters.
//! - [`model`]: GPT-style decoder weights and the skip-aware forward pass.
//! - [`checkpoint`]: binary checkpoint format (JSON header + raw f32 data
//!   + CRC-32).
//! - [`generation`]: batched autoregressive decoding, nucleus sampling, and
//!   budget accounting.
//! - [`baselines`]: fixed-truncation and adaptive saturation-exit policies
//!   for head-to-head comparison.
//! - [`training`]: manual-backprop training, schedule-aware fine-tuning,
//!   per-position loss measurement, and the synthetic corpus generator.

// kernel and backward code indexes rows/columns explicitly so the forward
// and reverse passes stay visibly symmetric
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod checkpoint;
pub mod generation;
pub mod kvcache;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use generation::{BatchState, BudgetReport, GenerationConfig, PolicyKind};
pub use kvcache::KVCache;
pub use model::{DecoderWeights, ModelConfig, StepOutput};
pub use schedule::{ActiveLayerSet, ExitSchedule, ScheduleConfig, SpeedupPreset};
pub use tensor::{Scalar, Tensor2D};

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter vector) had incompatible shapes.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A caller violated an operation's stated precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// No preset exists for the requested (base layers, speedup) pair.
    #[error("no preset for {base_layers} layers at {speedup}x speedup; available: {available}")]
    UnknownPreset {
        base_layers: usize,
        speedup: f64,
        available: String,
    },

    /// A policy was asked to do something it cannot (e.g. batched CALM-DEC).
    #[error("unsupported by policy {policy}: {reason}")]
    UnsupportedPolicy { policy: String, reason: String },

    /// Checkpoint data section failed its CRC-32 check.
    #[error("checkpoint checksum mismatch: header says {expected:#010x}, data hashes to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },

    /// Malformed checkpoint, corpus, or config file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
