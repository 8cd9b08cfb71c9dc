//! Block-wise diffusion language modeling on toy transformers.
//!
//! This crate implements the full pipeline for converting an autoregressive
//! (AR) language model into a block-wise diffusion language model (dLM) and
//! measuring what the conversion preserves:
//!
//! * [`corpus`] — byte-level vocabulary, synthetic diagnostic tasks, and
//!   deterministic batch streams.
//! * [`masking`] — noise levels, position-dependent masking weights, and
//!   Gumbel-top-k masked-set sampling.
//! * [`attention`] — explicit attention layouts: causal, bidirectional,
//!   block-wise with noisy context, block-wise with clean context, and the
//!   decode-time layout used with a KV cache.
//! * [`model`] — a tiny transformer with hand-written gradients, generic
//!   over `f32`/`f64`, plus losses, AdamW, checkpoints, and drift metrics.
//! * [`decoder`] — KV-cached block-wise generation with
//!   confidence-threshold parallel commits.
//! * [`harness`] — experiment configs, training/eval runs, sweeps, and
//!   report emission.

pub mod attention;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod masking;
pub mod model;

pub use attention::{AttentionLayout, LayoutKind, RowRole};
pub use corpus::{TaskInstance, TaskKind, TokenId, TokenSequence, Vocabulary};
pub use decoder::{ConfidenceMeasure, DecodeConfig, DecodeOutcome, DecodeState, DecodeTrace};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RunDir};
pub use masking::{MaskMode, MaskSchedule, NoiseInstance};
pub use model::{Mat, ModelConfig, ModelParams, Scalar, TrainState};

