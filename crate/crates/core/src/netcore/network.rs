use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, RngCore};

use super::layers::{self, BatchNormOutput, LstmCache, NormMode};
use super::params::{AttentionWeights, ModelParams, Weights};
use super::Real;
use crate::error::{Error, Result};

/// Arithmetic regime of a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    /// Layer activations and backpropagated signals are rounded to IEEE
    /// binary16 between layers; loss, parameter gradients and weights stay
    /// in the native type.
    Mixed,
}

/// Whether a forward pass trains (batch statistics, dropout) or infers.
pub enum Pass<'a> {
    Infer,
    Train(&'a mut dyn RngCore),
}

/// Activations kept for backpropagation.
pub struct ForwardCache<T> {
    pub mode: NormMode,
    pub embedded: Array3<T>,
    pub conv_cols: Array2<T>,
    pub conv_out: Array3<T>,
    pub bn: BatchNormOutput<T>,
    pub pooled: Array3<T>,
    pub pool_argmax: Array3<u8>,
    pub lstm_fwd: LstmCache<T>,
    pub lstm_bwd: LstmCache<T>,
    pub hidden: Array3<T>,
    /// Attention weights (B, T) when attention pooling is used.
    pub attention: Option<Array2<T>>,
    pub context: Array2<T>,
    pub dense_pre: Array2<T>,
    /// Inverted-dropout multipliers (0 or 1/keep), train mode only.
    pub dropout_mask: Option<Array2<T>>,
    pub dense_out: Array2<T>,
    pub logits: Array2<T>,
    pub probs: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.probs.nrows()
    }

    /// Output shape of each stage, input ids excluded.
    pub fn shape_trace(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("embedding", self.embedded.shape().to_vec()),
            ("conv", self.conv_out.shape().to_vec()),
            ("maxpool", self.pooled.shape().to_vec()),
            ("bilstm", self.hidden.shape().to_vec()),
            ("pooling", self.context.shape().to_vec()),
            ("dense", self.dense_out.shape().to_vec()),
            ("output", self.probs.shape().to_vec()),
        ]
    }
}

/// Model parameters plus the arithmetic regime used to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub params: ModelParams<T>,
    pub precision: Precision,
}

impl<T: Real> Network<T> {
    pub fn new(params: ModelParams<T>) -> Self {
        Network {
            params,
            precision: Precision::Full,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    fn round<D: ndarray::Dimension>(&self, a: &mut ndarray::Array<T, D>) {
        if self.precision == Precision::Mixed {
            a.mapv_inplace(T::to_f16_precision);
        }
    }

    pub fn forward(&self, ids: &Array2<u32>, pass: Pass<'_>) -> Result<ForwardCache<T>> {
        let p = &self.params;
        let cfg = &p.config;
        let w = &p.weights;
        if ids.ncols() != cfg.seq_len {
            return Err(Error::Shape(format!(
                "input sequences have length {}, model expects {}",
                ids.ncols(),
                cfg.seq_len
            )));
        }
        if ids.nrows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let (mode, rng) = match pass {
            Pass::Infer => (NormMode::Infer, None),
            Pass::Train(r) => (NormMode::Train, Some(r)),
        };

        let mut embedded = layers::embed_forward(ids, &p.embedding)?;
        self.round(&mut embedded);
        let conv = layers::conv1d_forward(embedded.view(), &w.conv_kernel, &w.conv_bias, cfg.conv_kernel)?;
        let mut conv_out = conv.out;
        self.round(&mut conv_out);
        let mut bn = layers::batchnorm_forward(
            conv_out.view(),
            &w.bn_gamma,
            &w.bn_beta,
            &p.bn_moving_mean,
            &p.bn_moving_var,
            mode,
            cfg.bn_epsilon,
        )?;
        self.round(&mut bn.out);
        let (mut pooled, pool_argmax) = layers::maxpool1d_forward(bn.out.view(), cfg.pool_size)?;
        self.round(&mut pooled);

        let lstm_fwd = layers::lstm_forward(pooled.view(), &w.lstm_fwd, false)?;
        let lstm_bwd = layers::lstm_forward(pooled.view(), &w.lstm_bwd, true)?;
        let mut hidden = layers::concat_directions(&lstm_fwd.hidden, &lstm_bwd.hidden);
        self.round(&mut hidden);

        let (mut context, attention) = match &w.attention {
            Some(a) => {
                let (c, wts) = layers::attention_pool(hidden.view(), a)?;
                (c, Some(wts))
            }
            None => (layers::average_pool(hidden.view()), None),
        };
        self.round(&mut context);

        let dense_pre = layers::dense(context.view(), &w.dense_w, &w.dense_b);
        let mut dense_out = dense_pre.mapv(|v| v.max(T::zero()));
        let dropout_mask = match rng {
            Some(rng) if cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - cfg.dropout_rate;
                let scale = T::of(1.0 / keep);
                let mask = Array2::from_shape_simple_fn(dense_out.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                });
                dense_out *= &mask;
                Some(mask)
            }
            _ => None,
        };
        self.round(&mut dense_out);
        let logits = layers::dense(dense_out.view(), &w.out_w, &w.out_b);
        let probs = layers::sigmoid_array(&logits);

        Ok(ForwardCache {
            mode,
            embedded,
            conv_cols: conv.cols,
            conv_out,
            bn,
            pooled,
            pool_argmax,
            lstm_fwd,
            lstm_bwd,
            hidden,
            attention,
            context,
            dense_pre,
            dropout_mask,
            dense_out,
            logits,
            probs,
        })
    }

    /// Gradients of the mean BCE loss w.r.t. every trainable tensor,
    /// multiplied by `loss_scale`. The embedding and moving statistics get
    /// no gradient.
    pub fn backward(&self, cache: &ForwardCache<T>, targets: ArrayView2<T>, loss_scale: f64) -> Result<Weights<T>> {
        let p = &self.params;
        let cfg = &p.config;
        let w = &p.weights;
        if cache.mode != NormMode::Train {
            return Err(Error::Data("backward requires a train-mode forward pass".into()));
        }
        if targets.dim() != cache.probs.dim() {
            return Err(Error::Shape(format!(
                "targets {:?} do not match outputs {:?}",
                targets.dim(),
                cache.probs.dim()
            )));
        }
        if cache.hidden.dim().2 != cfg.hidden_dim()
            || cache.attention.is_some() != w.attention.is_some()
            || cache.conv_cols.ncols() != w.conv_kernel.nrows()
        {
            return Err(Error::Shape("forward cache does not match the model parameters".into()));
        }
        let mut g = w.zeros_like();

        let mut dlogits = layers::bce_grad_logits(cache.probs.view(), targets, loss_scale);
        self.round(&mut dlogits);
        g.out_w = cache.dense_out.t().dot(&dlogits);
        g.out_b = layers::column_sums(dlogits.view());

        let mut ddense = dlogits.dot(&w.out_w.t());
        if let Some(mask) = &cache.dropout_mask {
            ddense *= mask;
        }
        layers::relu_mask_inplace(&mut ddense, &cache.dense_pre);
        self.round(&mut ddense);
        g.dense_w = cache.context.t().dot(&ddense);
        g.dense_b = layers::column_sums(ddense.view());

        let mut dctx = ddense.dot(&w.dense_w.t());
        self.round(&mut dctx);
        let mut dhidden = match (&w.attention, &cache.attention) {
            (Some(a), Some(weights)) => {
                let (dh, dw, db) = layers::attention_backward(cache.hidden.view(), weights, a, dctx.view());
                g.attention = Some(AttentionWeights { w: dw, b: db });
                dh
            }
            _ => layers::average_pool_backward(dctx.view(), cache.hidden.dim().1),
        };
        self.round(&mut dhidden);

        let u = cfg.lstm_units;
        let (dx_f, g_f) = layers::lstm_backward(
            cache.pooled.view(),
            &w.lstm_fwd,
            &cache.lstm_fwd,
            dhidden.slice(s![.., .., ..u]),
        );
        let (dx_b, g_b) = layers::lstm_backward(
            cache.pooled.view(),
            &w.lstm_bwd,
            &cache.lstm_bwd,
            dhidden.slice(s![.., .., u..]),
        );
        g.lstm_fwd = g_f;
        g.lstm_bwd = g_b;
        let mut dpooled = dx_f + &dx_b;
        self.round(&mut dpooled);

        let dbn = layers::maxpool1d_backward(dpooled.view(), &cache.pool_argmax, cfg.pool_size);
        let (mut dconv, dgamma, dbeta) = layers::batchnorm_backward(&cache.bn, &w.bn_gamma, dbn.view());
        self.round(&mut dconv);
        g.bn_gamma = dgamma;
        g.bn_beta = dbeta;
        let (dk, db) = layers::conv1d_backward(&cache.conv_cols, dconv.view());
        g.conv_kernel = dk;
        g.conv_bias = db;
        Ok(g)
    }

    /// Folds the batch statistics of a train-mode pass into the moving averages.
    pub fn update_moving_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != NormMode::Train {
            return;
        }
        let m = self.params.config.bn_momentum;
        layers::update_moving_stats(&mut self.params.bn_moving_mean, &cache.bn.batch_mean, m);
        layers::update_moving_stats(&mut self.params.bn_moving_var, &cache.bn.batch_var, m);
    }

    /// Inference-mode probabilities, computed in chunks of `batch_size` rows.
    pub fn predict(&self, ids: &Array2<u32>, batch_size: usize) -> Result<Array2<T>> {
        let n = ids.nrows();
        let mut out = Array2::zeros((n, self.params.config.num_labels));
        let step = batch_size.max(1);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let chunk = ids.slice(s![start..end, ..]).to_owned();
            let cache = self.forward(&chunk, Pass::Infer)?;
            out.slice_mut(s![start..end, ..]).assign(&cache.probs);
        }
        Ok(out)
    }

    /// Mean inference-mode loss over a labelled set.
    pub fn evaluate_loss(&self, ids: &Array2<u32>, labels: &Array2<u8>, batch_size: usize) -> Result<f64> {
        if ids.nrows() == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        let probs = self.predict(ids, batch_size)?;
        let y = labels.mapv(|v| T::of(v as f64));
        Ok(layers::bce_loss(probs.view(), y.view()))
    }
}

/// Converts a binary label matrix into targets of the network's type.
pub fn targets<T: Real>(labels: &Array2<u8>) -> Array2<T> {
    labels.mapv(|v| T::of(v as f64))
}
