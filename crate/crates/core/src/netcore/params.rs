use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, Real};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Per-layer parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCounts {
    pub embedding: usize,
    pub conv: usize,
    /// gamma, beta and both moving statistics.
    pub batch_norm: usize,
    pub bilstm: usize,
    pub attention: usize,
    pub dense: usize,
    pub output: usize,
}

impl LayerCounts {
    pub fn total(&self) -> usize {
        self.embedding
            + self.conv
            + self.batch_norm
            + self.bilstm
            + self.attention
            + self.dense
            + self.output
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub layers: LayerCounts,
}

/// One LSTM direction. Gate blocks along the last axis are ordered input,
/// forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<T> {
    /// (input_dim, 4 * units)
    pub kernel: Array2<T>,
    /// (units, 4 * units)
    pub recurrent: Array2<T>,
    /// (4 * units)
    pub bias: Array1<T>,
}

impl<T: Real> LstmWeights<T> {
    pub fn zeros(input_dim: usize, units: usize) -> Self {
        LstmWeights {
            kernel: Array2::zeros((input_dim, 4 * units)),
            recurrent: Array2::zeros((units, 4 * units)),
            bias: Array1::zeros(4 * units),
        }
    }

    pub fn units(&self) -> usize {
        self.recurrent.nrows()
    }
}

/// Scoring vector and bias of the attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w: Array1<T>,
    pub b: Array1<T>,
}

/// Every trainable tensor. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// (kernel * embed_dim, filters); row `k * embed_dim + c` is tap `k`, channel `c`.
    pub conv_kernel: Array2<T>,
    pub conv_bias: Array1<T>,
    pub bn_gamma: Array1<T>,
    pub bn_beta: Array1<T>,
    pub lstm_fwd: LstmWeights<T>,
    pub lstm_bwd: LstmWeights<T>,
    pub attention: Option<AttentionWeights<T>>,
    pub dense_w: Array2<T>,
    pub dense_b: Array1<T>,
    pub out_w: Array2<T>,
    pub out_b: Array1<T>,
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let f = cfg.conv_filters;
        let h = cfg.hidden_dim();
        Weights {
            conv_kernel: Array2::zeros((cfg.conv_kernel * cfg.embed_dim, f)),
            conv_bias: Array1::zeros(f),
            bn_gamma: Array1::zeros(f),
            bn_beta: Array1::zeros(f),
            lstm_fwd: LstmWeights::zeros(f, cfg.lstm_units),
            lstm_bwd: LstmWeights::zeros(f, cfg.lstm_units),
            attention: cfg.use_attention.then(|| AttentionWeights {
                w: Array1::zeros(h),
                b: Array1::zeros(1),
            }),
            dense_w: Array2::zeros((h, cfg.dense_units)),
            dense_b: Array1::zeros(cfg.dense_units),
            out_w: Array2::zeros((cfg.dense_units, cfg.num_labels)),
            out_b: Array1::zeros(cfg.num_labels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.views_mut().into_iter().for_each(|(_, mut v)| v.fill(T::zero()));
        z
    }

    /// Named views in a fixed order. The conv kernel is exposed as
    /// (kernel, embed_dim, filters).
    pub fn views(&self, embed_dim: usize) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        let k = self.conv_kernel.nrows() / embed_dim.max(1);
        let mut out = vec![
            (
                "conv_kernel",
                self.conv_kernel
                    .view()
                    .into_shape_with_order(IxDyn(&[k, embed_dim, self.conv_kernel.ncols()]))
                    .expect("contiguous conv kernel"),
            ),
            ("conv_bias", self.conv_bias.view().into_dyn()),
            ("bn_gamma", self.bn_gamma.view().into_dyn()),
            ("bn_beta", self.bn_beta.view().into_dyn()),
            ("lstm_fwd_kernel", self.lstm_fwd.kernel.view().into_dyn()),
            ("lstm_fwd_recurrent", self.lstm_fwd.recurrent.view().into_dyn()),
            ("lstm_fwd_bias", self.lstm_fwd.bias.view().into_dyn()),
            ("lstm_bwd_kernel", self.lstm_bwd.kernel.view().into_dyn()),
            ("lstm_bwd_recurrent", self.lstm_bwd.recurrent.view().into_dyn()),
            ("lstm_bwd_bias", self.lstm_bwd.bias.view().into_dyn()),
        ];
        if let Some(a) = &self.attention {
            out.push(("attn_w", a.w.view().into_dyn()));
            out.push(("attn_b", a.b.view().into_dyn()));
        }
        out.extend([
            ("dense_w", self.dense_w.view().into_dyn()),
            ("dense_b", self.dense_b.view().into_dyn()),
            ("out_w", self.out_w.view().into_dyn()),
            ("out_b", self.out_b.view().into_dyn()),
        ]);
        out
    }

    /// Flat mutable views in the same order as [`Weights::views`].
    pub fn views_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("conv_kernel", self.conv_kernel.view_mut().into_dyn()),
            ("conv_bias", self.conv_bias.view_mut().into_dyn()),
            ("bn_gamma", self.bn_gamma.view_mut().into_dyn()),
            ("bn_beta", self.bn_beta.view_mut().into_dyn()),
            ("lstm_fwd_kernel", self.lstm_fwd.kernel.view_mut().into_dyn()),
            ("lstm_fwd_recurrent", self.lstm_fwd.recurrent.view_mut().into_dyn()),
            ("lstm_fwd_bias", self.lstm_fwd.bias.view_mut().into_dyn()),
            ("lstm_bwd_kernel", self.lstm_bwd.kernel.view_mut().into_dyn()),
            ("lstm_bwd_recurrent", self.lstm_bwd.recurrent.view_mut().into_dyn()),
            ("lstm_bwd_bias", self.lstm_bwd.bias.view_mut().into_dyn()),
        ];
        if let Some(a) = &mut self.attention {
            out.push(("attn_w", a.w.view_mut().into_dyn()));
            out.push(("attn_b", a.b.view_mut().into_dyn()));
        }
        out.extend([
            ("dense_w", self.dense_w.view_mut().into_dyn()),
            ("dense_b", self.dense_b.view_mut().into_dyn()),
            ("out_w", self.out_w.view_mut().into_dyn()),
            ("out_b", self.out_b.view_mut().into_dyn()),
        ]);
        out
    }

    pub fn len(&self) -> usize {
        self.views(1).iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.views(1)
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: T) {
        for (_, mut v) in self.views_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.to_f64().unwrap()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64().unwrap()));
        let cl = |l: &LstmWeights<T>| LstmWeights {
            kernel: c2(&l.kernel),
            recurrent: c2(&l.recurrent),
            bias: c1(&l.bias),
        };
        Weights {
            conv_kernel: c2(&self.conv_kernel),
            conv_bias: c1(&self.conv_bias),
            bn_gamma: c1(&self.bn_gamma),
            bn_beta: c1(&self.bn_beta),
            lstm_fwd: cl(&self.lstm_fwd),
            lstm_bwd: cl(&self.lstm_bwd),
            attention: self.attention.as_ref().map(|a| AttentionWeights {
                w: c1(&a.w),
                b: c1(&a.b),
            }),
            dense_w: c2(&self.dense_w),
            dense_b: c1(&self.dense_b),
            out_w: c2(&self.out_w),
            out_b: c1(&self.out_b),
        }
    }
}

/// Full model state: frozen embedding, trainable weights and the frozen
/// batch-norm moving statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub embedding: Arc<EmbeddingMatrix<T>>,
    pub weights: Weights<T>,
    pub bn_moving_mean: Array1<T>,
    pub bn_moving_var: Array1<T>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize, fan_out: usize) -> Array2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::of(rng.random_range(-limit..limit)))
}

/// (rows, cols) matrix with orthonormal rows (rows <= cols), from modified
/// Gram-Schmidt on a Gaussian matrix.
fn orthogonal<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while q.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        for basis in &q {
            let d: f64 = v.iter().zip(basis).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(basis).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| T::of(q[i][j]))
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization: Glorot-uniform kernels, orthogonal recurrent
    /// kernels, forget-gate bias 1, other biases 0, identity batch norm.
    pub fn init(config: &ModelConfig, embedding: Arc<EmbeddingMatrix<T>>, seed: u64) -> Result<Self> {
        config.validate()?;
        if embedding.dim() != config.embed_dim {
            return Err(Error::Shape(format!(
                "embedding dim {} but model expects {}",
                embedding.dim(),
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::<T>::zeros(config);
        let (k, e, f, u) = (config.conv_kernel, config.embed_dim, config.conv_filters, config.lstm_units);
        w.conv_kernel = glorot(&mut rng, (k * e, f), k * e, k * f);
        w.bn_gamma.fill(T::one());
        for lstm in [&mut w.lstm_fwd, &mut w.lstm_bwd] {
            lstm.kernel = glorot(&mut rng, (f, 4 * u), f, 4 * u);
            lstm.recurrent = orthogonal(&mut rng, u, 4 * u);
            lstm.bias.slice_mut(ndarray::s![u..2 * u]).fill(T::one());
        }
        let h = config.hidden_dim();
        if let Some(a) = &mut w.attention {
            a.w = glorot::<T>(&mut rng, (h, 1), h, 1).into_shape_with_order(h).expect("column");
        }
        w.dense_w = glorot(&mut rng, (h, config.dense_units), h, config.dense_units);
        w.out_w = glorot(
            &mut rng,
            (config.dense_units, config.num_labels),
            config.dense_units,
            config.num_labels,
        );
        Ok(ModelParams {
            config: config.clone(),
            embedding,
            weights: w,
            bn_moving_mean: Array1::zeros(f),
            bn_moving_var: Array1::ones(f),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    /// Counts taken from the actual tensor sizes.
    pub fn count_params(&self) -> ParamCounts {
        let w = &self.weights;
        let lstm = |l: &LstmWeights<T>| l.kernel.len() + l.recurrent.len() + l.bias.len();
        let layers = LayerCounts {
            embedding: self.embedding.values.len(),
            conv: w.conv_kernel.len() + w.conv_bias.len(),
            batch_norm: w.bn_gamma.len()
                + w.bn_beta.len()
                + self.bn_moving_mean.len()
                + self.bn_moving_var.len(),
            bilstm: lstm(&w.lstm_fwd) + lstm(&w.lstm_bwd),
            attention: w.attention.as_ref().map_or(0, |a| a.w.len() + a.b.len()),
            dense: w.dense_w.len() + w.dense_b.len(),
            output: w.out_w.len() + w.out_b.len(),
        };
        let trainable = w.len();
        let frozen = layers.embedding + self.bn_moving_mean.len() + self.bn_moving_var.len();
        ParamCounts {
            total: trainable + frozen,
            trainable,
            frozen,
            layers,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            embedding: Arc::new(self.embedding.cast()),
            weights: self.weights.cast(),
            bn_moving_mean: self.bn_moving_mean.mapv(|v| U::of(v.to_f64().unwrap())),
            bn_moving_var: self.bn_moving_var.mapv(|v| U::of(v.to_f64().unwrap())),
        }
    }
}
