//! CNN / BatchNorm / MaxPool / BiLSTM / attention network for multi-label
//! emotion scoring.
//!
//! Shape chain for a batch of `B` sequences with the default configuration:
//!
//! ```text
//! ids (B,30) -> embedding (B,30,300) -> conv (B,26,64) -> batchnorm+relu
//!   -> maxpool (B,13,64) -> bilstm (B,13,256) -> attention | mean (B,256)
//!   -> dense+relu (B,128) -> dropout -> dense+sigmoid (B,28)
//! ```
//!
//! Every layer has a hand-written backward pass. The network is generic over
//! [`Real`] so the same code runs in `f32` for training and in `f64` for
//! finite-difference gradient checks.

mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod network;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};

use crate::error::{Error, Result};
use crate::{NUM_LABELS, SEQ_LEN};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{targets, ForwardCache, Network, Pass, Precision};
pub use params::{AttentionWeights, LayerCounts, LstmWeights, ModelParams, ParamCounts, Weights};

/// Floating-point element type of the network.
pub trait Real:
    LinalgScalar
    + num_traits::Float
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f16_precision(self) -> Self;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn to_f16_precision(self) -> Self {
        half::f16::from_f32(self).to_f32()
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn to_f16_precision(self) -> Self {
        half::f16::from_f64(self).to_f64()
    }
}

/// Layer sizes and fixed hyperparameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub embed_dim: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub pool_size: usize,
    pub lstm_units: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub num_labels: usize,
    pub use_attention: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: SEQ_LEN,
            embed_dim: 300,
            conv_filters: 64,
            conv_kernel: 5,
            pool_size: 2,
            lstm_units: 128,
            dense_units: 128,
            dropout_rate: 0.5,
            num_labels: NUM_LABELS,
            use_attention: true,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

impl ModelConfig {
    /// Length of the valid convolution output.
    pub fn conv_len(&self) -> usize {
        self.seq_len + 1 - self.conv_kernel
    }

    pub fn pooled_len(&self) -> usize {
        self.conv_len() / self.pool_size
    }

    /// Width of the concatenated BiLSTM output.
    pub fn hidden_dim(&self) -> usize {
        2 * self.lstm_units
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("embed_dim", self.embed_dim),
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("pool_size", self.pool_size),
            ("lstm_units", self.lstm_units),
            ("dense_units", self.dense_units),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.conv_kernel > self.seq_len {
            return Err(Error::Config("model.conv_kernel exceeds seq_len".into()));
        }
        if !self.conv_len().is_multiple_of(self.pool_size) {
            return Err(Error::Config(format!(
                "conv output length {} is not divisible by pool_size {}",
                self.conv_len(),
                self.pool_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("model.dropout_rate must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("invalid batch-norm momentum/epsilon".into()));
        }
        Ok(())
    }

    /// Parameter counts from the closed-form layer formulas.
    pub fn param_counts(&self, vocab_size: usize) -> ParamCounts {
        let u = self.lstm_units;
        let f = self.conv_filters;
        let layers = LayerCounts {
            embedding: vocab_size * self.embed_dim,
            conv: self.conv_kernel * self.embed_dim * f + f,
            batch_norm: 4 * f,
            bilstm: 2 * 4 * (u * (f + u) + u),
            attention: if self.use_attention { 2 * u + 1 } else { 0 },
            dense: 2 * u * self.dense_units + self.dense_units,
            output: self.dense_units * self.num_labels + self.num_labels,
        };
        let frozen = layers.embedding + 2 * f;
        let total = layers.total();
        ParamCounts {
            total,
            trainable: total - frozen,
            frozen,
            layers,
        }
    }
}
