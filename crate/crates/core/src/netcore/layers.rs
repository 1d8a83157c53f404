//! Individual layer kernels. Sequence tensors are `(batch, time, channels)`
//! in standard (row-major) layout.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, CowArray, Ix2};

use super::params::{AttentionWeights, LstmWeights};
use super::Real;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Probability clamp used by the loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn shape_err(what: &str, want: &[usize], got: &[usize]) -> Error {
    Error::Shape(format!("{what}: expected {want:?}, found {got:?}"))
}

fn as3<T: Real>(a: Array2<T>, d0: usize, d1: usize) -> Array3<T> {
    let d2 = a.ncols();
    a.into_shape_with_order((d0, d1, d2)).expect("standard layout")
}

fn flat<'a, T: Real>(a: &'a ArrayView3<'a, T>) -> CowArray<'a, T, Ix2> {
    let (b, t, c) = a.dim();
    if a.is_standard_layout() {
        a.view().into_shape_with_order((b * t, c)).expect("standard layout").into()
    } else {
        Array2::from_shape_vec((b * t, c), a.iter().copied().collect()).expect("element count").into()
    }
}

/// Row lookup: `out[b][t] = E[ids[b][t]]`.
pub fn embed_forward<T: Real>(ids: &Array2<u32>, emb: &EmbeddingMatrix<T>) -> Result<Array3<T>> {
    let (b, t) = ids.dim();
    let dim = emb.dim();
    let mut out = Array3::zeros((b, t, dim));
    for ((bi, ti), &id) in ids.indexed_iter() {
        if id as usize >= emb.vocab_size() {
            return Err(Error::Data(format!(
                "token id {id} out of range for vocabulary of {}",
                emb.vocab_size()
            )));
        }
        out.slice_mut(s![bi, ti, ..]).assign(&emb.values.row(id as usize));
    }
    Ok(out)
}

pub struct ConvOutput<T> {
    /// (B, L - K + 1, F)
    pub out: Array3<T>,
    /// Unfolded input windows, (B * out_len, K * C).
    pub cols: Array2<T>,
}

/// Valid 1-D cross-correlation over time with a linear output.
///
/// `kernel` is `(K * C, F)` with row `k * C + c` holding tap `k` of input
/// channel `c`.
pub fn conv1d_forward<T: Real>(
    x: ArrayView3<T>,
    kernel: &Array2<T>,
    bias: &Array1<T>,
    kernel_size: usize,
) -> Result<ConvOutput<T>> {
    let (b, len, c) = x.dim();
    let f = kernel.ncols();
    if kernel_size == 0 || kernel_size > len || kernel.nrows() != kernel_size * c || bias.len() != f {
        return Err(shape_err(
            "conv1d kernel",
            &[kernel_size * c, f],
            kernel.shape(),
        ));
    }
    let out_len = len - kernel_size + 1;
    let mut cols = Array2::zeros((b * out_len, kernel_size * c));
    for bi in 0..b {
        for t in 0..out_len {
            let window = x.slice(s![bi, t..t + kernel_size, ..]);
            let mut row = cols.row_mut(bi * out_len + t);
            let dst = row.as_slice_mut().expect("contiguous row");
            for (d, v) in dst.iter_mut().zip(window.iter()) {
                *d = *v;
            }
        }
    }
    let mut out = Array2::from_shape_fn((b * out_len, f), |(_, j)| bias[j]);
    general_mat_mul(T::one(), &cols, kernel, T::one(), &mut out);
    Ok(ConvOutput {
        out: as3(out, b, out_len),
        cols,
    })
}

/// Kernel and bias gradients from the unfolded input and `dout` (B, L', F).
pub fn conv1d_backward<T: Real>(cols: &Array2<T>, dout: ArrayView3<T>) -> (Array2<T>, Array1<T>) {
    let d = flat(&dout);
    (cols.t().dot(&d), d.sum_axis(Axis(0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

pub struct BatchNormOutput<T> {
    /// After the affine transform and ReLU.
    pub out: Array3<T>,
    pub xhat: Array3<T>,
    pub inv_std: Array1<T>,
    pub batch_mean: Array1<T>,
    pub batch_var: Array1<T>,
    pub mode: NormMode,
}

/// Per-channel normalization over batch and time, affine transform, ReLU.
/// Train mode uses (biased) batch statistics; infer mode the moving ones.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Real>(
    x: ArrayView3<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    moving_mean: &Array1<T>,
    moving_var: &Array1<T>,
    mode: NormMode,
    epsilon: f64,
) -> Result<BatchNormOutput<T>> {
    let (b, t, c) = x.dim();
    if gamma.len() != c || beta.len() != c || moving_mean.len() != c || moving_var.len() != c {
        return Err(shape_err("batchnorm parameters", &[c], gamma.shape()));
    }
    if mode == NormMode::Train && b < 2 {
        return Err(Error::Data("batch normalization in train mode needs at least 2 rows".into()));
    }
    let xf = flat(&x);
    let (mean, var) = match mode {
        NormMode::Train => {
            let n = T::of((b * t) as f64);
            let mean = xf.sum_axis(Axis(0)) / n;
            let mut var = Array1::zeros(c);
            for row in xf.rows() {
                for ((v, &xv), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                    let d: T = xv - m;
                    *v += d * d;
                }
            }
            (mean, var / n)
        }
        NormMode::Infer => (moving_mean.clone(), moving_var.clone()),
    };
    let eps = T::of(epsilon);
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut xhat = Array2::zeros((b * t, c));
    let mut out = Array2::zeros((b * t, c));
    for ((xr, mut hr), mut or) in xf.rows().into_iter().zip(xhat.rows_mut()).zip(out.rows_mut()) {
        for j in 0..c {
            let h = (xr[j] - mean[j]) * inv_std[j];
            hr[j] = h;
            let y = gamma[j] * h + beta[j];
            or[j] = if y > T::zero() { y } else { T::zero() };
        }
    }
    Ok(BatchNormOutput {
        out: as3(out, b, t),
        xhat: as3(xhat, b, t),
        inv_std,
        batch_mean: mean,
        batch_var: var,
        mode,
    })
}

/// `m <- momentum * m + (1 - momentum) * batch`.
pub fn update_moving_stats<T: Real>(moving: &mut Array1<T>, batch: &Array1<T>, momentum: f64) {
    let m = T::of(momentum);
    let one_m = T::of(1.0 - momentum);
    moving.zip_mut_with(batch, |a, &b| *a = m * *a + one_m * b);
}

/// Gradients (dx, dgamma, dbeta) of a train-mode batch-norm + ReLU block.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormOutput<T>,
    gamma: &Array1<T>,
    dout: ArrayView3<T>,
) -> (Array3<T>, Array1<T>, Array1<T>) {
    let (b, t, c) = dout.dim();
    let n = (b * t) as f64;
    let xhat = cache.xhat.view();
    let xh = flat(&xhat);
    let out = cache.out.view();
    let outf = flat(&out);
    let d = flat(&dout);
    let mut dlin = Array2::zeros((b * t, c));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for i in 0..b * t {
        for j in 0..c {
            if outf[[i, j]] > T::zero() {
                let g = d[[i, j]];
                dlin[[i, j]] = g;
                dgamma[j] += g * xh[[i, j]];
                dbeta[j] += g;
            }
        }
    }
    let mut dx = Array2::zeros((b * t, c));
    match cache.mode {
        NormMode::Train => {
            // dxhat = dlin * gamma; sums over the batch follow from dgamma/dbeta.
            let sum_dxhat: Vec<T> = (0..c).map(|j| dbeta[j] * gamma[j]).collect();
            let sum_dxhat_xhat: Vec<T> = (0..c).map(|j| dgamma[j] * gamma[j]).collect();
            let nt = T::of(n);
            for i in 0..b * t {
                for j in 0..c {
                    let dxhat = dlin[[i, j]] * gamma[j];
                    dx[[i, j]] = cache.inv_std[j] / nt
                        * (nt * dxhat - sum_dxhat[j] - xh[[i, j]] * sum_dxhat_xhat[j]);
                }
            }
        }
        NormMode::Infer => {
            for i in 0..b * t {
                for j in 0..c {
                    dx[[i, j]] = dlin[[i, j]] * gamma[j] * cache.inv_std[j];
                }
            }
        }
    }
    (as3(dx, b, t), dgamma, dbeta)
}

/// Non-overlapping max pooling over time. `argmax` holds the winning offset
/// inside each window; ties go to the earlier position.
pub fn maxpool1d_forward<T: Real>(x: ArrayView3<T>, pool: usize) -> Result<(Array3<T>, Array3<u8>)> {
    let (b, len, c) = x.dim();
    if pool == 0 || len % pool != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs a time length divisible by {pool}, found {len}"
        )));
    }
    let out_len = len / pool;
    let mut out = Array3::zeros((b, out_len, c));
    let mut arg = Array3::<u8>::zeros((b, out_len, c));
    for bi in 0..b {
        for t in 0..out_len {
            for ch in 0..c {
                let mut best = x[[bi, t * pool, ch]];
                let mut best_k = 0u8;
                for k in 1..pool {
                    let v = x[[bi, t * pool + k, ch]];
                    if v > best {
                        best = v;
                        best_k = k as u8;
                    }
                }
                out[[bi, t, ch]] = best;
                arg[[bi, t, ch]] = best_k;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool1d_backward<T: Real>(dout: ArrayView3<T>, argmax: &Array3<u8>, pool: usize) -> Array3<T> {
    let (b, out_len, c) = dout.dim();
    let mut dx = Array3::zeros((b, out_len * pool, c));
    for ((bi, t, ch), &k) in argmax.indexed_iter() {
        dx[[bi, t * pool + k as usize, ch]] = dout[[bi, t, ch]];
    }
    dx
}

/// Activations of one LSTM direction, indexed by original time position.
pub struct LstmCache<T> {
    /// Post-activation gates (B, T, 4U): input, forget, cell, output.
    pub gates: Array3<T>,
    pub cell: Array3<T>,
    pub tanh_cell: Array3<T>,
    pub hidden: Array3<T>,
    pub reverse: bool,
}

/// Runs an LSTM over `x` (B, T, I) from zero initial state. With `reverse`
/// the sequence is consumed from the last step; outputs stay aligned with
/// the original time positions.
pub fn lstm_forward<T: Real>(x: ArrayView3<T>, w: &LstmWeights<T>, reverse: bool) -> Result<LstmCache<T>> {
    let (b, len, i_dim) = x.dim();
    let u = w.units();
    if w.kernel.dim() != (i_dim, 4 * u) || w.recurrent.dim() != (u, 4 * u) || w.bias.len() != 4 * u {
        return Err(shape_err("lstm kernel", &[i_dim, 4 * u], w.kernel.shape()));
    }
    let mut proj = flat(&x).dot(&w.kernel);
    proj += &w.bias;
    let proj = as3(proj, b, len);

    let mut gates = Array3::zeros((b, len, 4 * u));
    let mut cell = Array3::zeros((b, len, u));
    let mut tanh_cell = Array3::zeros((b, len, u));
    let mut hidden = Array3::zeros((b, len, u));
    let mut h_prev = Array2::<T>::zeros((b, u));
    let mut c_prev = Array2::<T>::zeros((b, u));
    let mut z = Array2::<T>::zeros((b, 4 * u));
    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        z.assign(&proj.slice(s![.., t, ..]));
        general_mat_mul(T::one(), &h_prev, &w.recurrent, T::one(), &mut z);
        for bi in 0..b {
            let zr = z.row(bi);
            let zr = zr.as_slice().expect("contiguous");
            for k in 0..u {
                let ig = sigmoid(zr[k]);
                let fg = sigmoid(zr[u + k]);
                let gg = zr[2 * u + k].tanh();
                let og = sigmoid(zr[3 * u + k]);
                let c = fg * c_prev[[bi, k]] + ig * gg;
                let tc = c.tanh();
                let h = og * tc;
                gates[[bi, t, k]] = ig;
                gates[[bi, t, u + k]] = fg;
                gates[[bi, t, 2 * u + k]] = gg;
                gates[[bi, t, 3 * u + k]] = og;
                cell[[bi, t, k]] = c;
                tanh_cell[[bi, t, k]] = tc;
                hidden[[bi, t, k]] = h;
                c_prev[[bi, k]] = c;
                h_prev[[bi, k]] = h;
            }
        }
    }
    Ok(LstmCache {
        gates,
        cell,
        tanh_cell,
        hidden,
        reverse,
    })
}

/// Backpropagation through time. Returns the input gradient and the weight
/// gradients for `dh` (B, T, U), the gradient w.r.t. the hidden outputs.
pub fn lstm_backward<T: Real>(
    x: ArrayView3<T>,
    w: &LstmWeights<T>,
    cache: &LstmCache<T>,
    dh: ArrayView3<T>,
) -> (Array3<T>, LstmWeights<T>) {
    let (b, len, i_dim) = x.dim();
    let u = w.units();
    let time = |step: usize| if cache.reverse { len - 1 - step } else { step };
    let mut dz_all = Array3::<T>::zeros((b, len, 4 * u));
    let mut dh_next = Array2::<T>::zeros((b, u));
    let mut dc_next = Array2::<T>::zeros((b, u));
    let mut d_rec = Array2::<T>::zeros((u, 4 * u));
    let mut dz = Array2::<T>::zeros((b, 4 * u));
    let one = T::one();
    for step in (0..len).rev() {
        let t = time(step);
        let prev_t = (step > 0).then(|| time(step - 1));
        for bi in 0..b {
            for k in 0..u {
                let ig = cache.gates[[bi, t, k]];
                let fg = cache.gates[[bi, t, u + k]];
                let gg = cache.gates[[bi, t, 2 * u + k]];
                let og = cache.gates[[bi, t, 3 * u + k]];
                let tc = cache.tanh_cell[[bi, t, k]];
                let c_prev = prev_t.map_or(T::zero(), |p| cache.cell[[bi, p, k]]);
                let dht = dh[[bi, t, k]] + dh_next[[bi, k]];
                let d_o = dht * tc;
                let dc = dht * og * (one - tc * tc) + dc_next[[bi, k]];
                dc_next[[bi, k]] = dc * fg;
                dz[[bi, k]] = dc * gg * ig * (one - ig);
                dz[[bi, u + k]] = dc * c_prev * fg * (one - fg);
                dz[[bi, 2 * u + k]] = dc * ig * (one - gg * gg);
                dz[[bi, 3 * u + k]] = d_o * og * (one - og);
            }
        }
        dz_all.slice_mut(s![.., t, ..]).assign(&dz);
        if let Some(p) = prev_t {
            let h_prev = cache.hidden.slice(s![.., p, ..]);
            general_mat_mul(one, &h_prev.t(), &dz, one, &mut d_rec);
        }
        dh_next = dz.dot(&w.recurrent.t());
    }
    let dz_view = dz_all.view();
    let dzf = flat(&dz_view);
    let xf = flat(&x);
    let grads = LstmWeights {
        kernel: xf.t().dot(&dzf),
        recurrent: d_rec,
        bias: dzf.sum_axis(Axis(0)),
    };
    let dx = as3(dzf.dot(&w.kernel.t()), b, len);
    debug_assert_eq!(dx.dim().2, i_dim);
    (dx, grads)
}

/// Concatenates per-timestep forward and backward hidden states.
pub fn concat_directions<T: Real>(fwd: &Array3<T>, bwd: &Array3<T>) -> Array3<T> {
    ndarray::concatenate(Axis(2), &[fwd.view(), bwd.view()]).expect("matching shapes")
}

/// Softmax attention over time: returns the weighted-sum context (B, H) and
/// the attention weights (B, T).
pub fn attention_pool<T: Real>(h: ArrayView3<T>, attn: &AttentionWeights<T>) -> Result<(Array2<T>, Array2<T>)> {
    let (b, len, hd) = h.dim();
    if attn.w.len() != hd || attn.b.len() != 1 {
        return Err(shape_err("attention weights", &[hd], attn.w.shape()));
    }
    let scores = flat(&h).dot(&attn.w) + attn.b[0];
    let scores = scores.into_shape_with_order((b, len)).expect("standard layout");
    let mut weights = Array2::zeros((b, len));
    for (srow, mut wrow) in scores.rows().into_iter().zip(weights.rows_mut()) {
        let max = srow.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (w, &s) in wrow.iter_mut().zip(srow) {
            *w = (s - max).exp();
            sum += *w;
        }
        wrow.mapv_inplace(|w| w / sum);
    }
    let mut ctx = Array2::zeros((b, hd));
    for bi in 0..b {
        let mut crow = ctx.row_mut(bi);
        for t in 0..len {
            crow.scaled_add(weights[[bi, t]], &h.slice(s![bi, t, ..]));
        }
    }
    Ok((ctx, weights))
}

/// Gradients (dh, dw, db) of [`attention_pool`].
pub fn attention_backward<T: Real>(
    h: ArrayView3<T>,
    weights: &Array2<T>,
    attn: &AttentionWeights<T>,
    dctx: ArrayView2<T>,
) -> (Array3<T>, Array1<T>, Array1<T>) {
    let (b, len, hd) = h.dim();
    let mut dh = Array3::zeros((b, len, hd));
    let mut dscore = Array2::<T>::zeros((b, len));
    for bi in 0..b {
        let dc = dctx.row(bi);
        let dalpha: Vec<T> = (0..len).map(|t| h.slice(s![bi, t, ..]).dot(&dc)).collect();
        let mean: T = (0..len).map(|t| weights[[bi, t]] * dalpha[t]).sum();
        for t in 0..len {
            let a = weights[[bi, t]];
            let ds = a * (dalpha[t] - mean);
            dscore[[bi, t]] = ds;
            let mut row = dh.slice_mut(s![bi, t, ..]);
            row.scaled_add(a, &dc);
            row.scaled_add(ds, &attn.w);
        }
    }
    let dw = flat(&h).t().dot(&dscore.view().into_shape_with_order(b * len).expect("flat"));
    let db = Array1::from_elem(1, dscore.sum());
    (dh, dw, db)
}

/// Unweighted mean over time.
pub fn average_pool<T: Real>(h: ArrayView3<T>) -> Array2<T> {
    h.sum_axis(Axis(1)) / T::of(h.dim().1 as f64)
}

pub fn average_pool_backward<T: Real>(dctx: ArrayView2<T>, len: usize) -> Array3<T> {
    let (b, hd) = dctx.dim();
    let scale = T::one() / T::of(len as f64);
    let mut dh = Array3::zeros((b, len, hd));
    for t in 0..len {
        dh.slice_mut(s![.., t, ..]).assign(&(&dctx * scale));
    }
    dh
}

/// `x W + b`.
pub fn dense<T: Real>(x: ArrayView2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub fn sigmoid_array<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(sigmoid)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
/// `y` may hold soft targets in [0, 1].
pub fn bce_loss<T: Real>(p: ArrayView2<T>, y: ArrayView2<T>) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    bce_sum(p, y) / n as f64
}

/// Summed (not averaged) clamped binary cross-entropy.
pub fn bce_sum<T: Real>(p: ArrayView2<T>, y: ArrayView2<T>) -> f64 {
    p.iter()
        .zip(y.iter())
        .map(|(&p, &y)| {
            let p = p.to_f64().unwrap().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y.to_f64().unwrap();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// Gradient of the mean loss w.r.t. the logits, `(p - y) / n`, multiplied by
/// `scale`.
pub fn bce_grad_logits<T: Real>(p: ArrayView2<T>, y: ArrayView2<T>, scale: f64) -> Array2<T> {
    let k = scale / p.len().max(1) as f64;
    let mut g = Array2::zeros(p.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(&p)
        .and(&y)
        .for_each(|g, &p, &y| *g = T::of((p.to_f64().unwrap() - y.to_f64().unwrap()) * k));
    g
}

/// Column sums, used for bias gradients.
pub fn column_sums<T: Real>(x: ArrayView2<T>) -> Array1<T> {
    x.sum_axis(Axis(0))
}

pub fn relu_mask_inplace<T: Real>(grad: &mut Array2<T>, pre: &Array2<T>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
}
