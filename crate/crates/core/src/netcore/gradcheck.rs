//! Central finite-difference check of [`Network::backward`] in `f64`.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::bce_loss;
use super::{ModelConfig, ModelParams, Network, Pass};
use crate::embeddings::EmbeddingMatrix;
use crate::error::Result;

/// Agreement between analytic and numeric gradients for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub len: usize,
    /// `||a - n|| / max(||a|| + ||n||, 1e-6)`. The floor keeps tensors whose
    /// exact gradient is zero (conv bias under batch norm) from comparing
    /// rounding noise with rounding noise.
    pub rel_error: f64,
}

/// Small configuration with the default sequence length.
pub fn tiny_config(use_attention: bool) -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        conv_filters: 4,
        lstm_units: 3,
        dense_units: 5,
        num_labels: 4,
        use_attention,
        ..ModelConfig::default()
    }
}

/// Compares every entry of every trainable tensor against central
/// differences with step `h`. Dropout is active with a fixed mask.
pub fn check_gradients(config: &ModelConfig, vocab: usize, batch: usize, seed: u64, h: f64) -> Result<Vec<TensorCheck>> {
    let embedding = EmbeddingMatrix::<f32>::random(vocab, config.embed_dim, seed).cast::<f64>();
    let mut params = ModelParams::init(config, Arc::new(embedding), seed)?;
    // Nonzero biases and off-identity batch-norm affine parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for (_, mut v) in params.weights.views_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-0.1..0.1));
    }
    let ids = Array2::from_shape_fn((batch, config.seq_len), |_| rng.random_range(1..vocab as u32));
    let y = Array2::from_shape_fn((batch, config.num_labels), |_| f64::from(u8::from(rng.random_bool(0.4))));
    let mut net = Network::new(params);

    let dropout_seed = seed.wrapping_add(7);
    let loss = |net: &Network<f64>| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let cache = net.forward(&ids, Pass::Train(&mut r))?;
        Ok(bce_loss(cache.probs.view(), y.view()))
    };
    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
    let cache = net.forward(&ids, Pass::Train(&mut r))?;
    let analytic = net.backward(&cache, y.view(), 1.0)?;
    let analytic: Vec<(&'static str, Vec<f64>)> = analytic
        .views(config.embed_dim)
        .into_iter()
        .map(|(n, v)| (n, v.iter().copied().collect()))
        .collect();

    let mut out = Vec::with_capacity(analytic.len());
    for (k, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let original = net.params.weights.views_mut()[k].1.as_slice_mut().expect("contiguous")[i];
            let set = |net: &mut Network<f64>, v: f64| {
                net.params.weights.views_mut()[k].1.as_slice_mut().expect("contiguous")[i] = v;
            };
            set(&mut net, original + h);
            let plus = loss(&net)?;
            set(&mut net, original - h);
            let minus = loss(&net)?;
            set(&mut net, original);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel_error = diff / (na + nn).max(1e-6);
        out.push(TensorCheck { name, len: a.len(), rel_error });
    }
    Ok(out)
}
