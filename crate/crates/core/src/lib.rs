//! Multi-label emotion classification over short social-media texts.
//!
//! The crate covers the whole pipeline:
//!
//! * [`corpus`]: TSV ingestion, text normalization, a train-only tokenizer and
//!   fixed-length encoding into 30-token id sequences with 28-dim label rows.
//! * [`augment`]: weak-label gating, annotator vote aggregation and seeded
//!   oversampling of under-represented labels.
//! * [`embeddings`]: FastText `.vec` parsing, frozen embedding matrix assembly
//!   and label cosine similarity.
//! * [`netcore`]: the CNN / BatchNorm / MaxPool / BiLSTM / attention network
//!   with hand-written forward and backward passes and a binary checkpoint
//!   format.
//! * [`trainer`]: Adam, mini-batching, early stopping and a mixed-precision
//!   mode with static loss scaling.
//! * [`evaluate`]: multi-label metrics, rank-based AUC, per-label threshold
//!   tuning and reports.

pub mod augment;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluate;
pub mod netcore;
pub mod synthetic;
pub mod trainer;

pub use corpus::{EncodedDataset, LabelVocabulary, Sample, Split, TokenizerState};
pub use embeddings::EmbeddingMatrix;
pub use error::{Error, Result};
pub use evaluate::{MetricsReport, PredictionMatrix, ThresholdVector};
pub use netcore::{ModelConfig, ModelParams, Network};
pub use trainer::{TrainingConfig, TrainingHistory};

/// Number of emotion categories.
pub const NUM_LABELS: usize = 28;

/// Fixed encoded sequence length.
pub const SEQ_LEN: usize = 30;
