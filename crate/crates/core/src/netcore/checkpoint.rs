//! Binary checkpoint format.
//!
//! ```text
//! magic      b"EMFG"
//! version    u32
//! config     seq_len embed_dim conv_filters conv_kernel pool_size lstm_units
//!            dense_units num_labels (u32 each), use_attention (u8),
//!            dropout_rate bn_momentum bn_epsilon (f64 each), vocab_size (u64)
//! count      u32
//! tensor*    name_len u16, name (utf-8), ndim u8, dims (u64 each),
//!            values (f32 each)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayViewMutD};

use super::params::{ModelParams, Weights};
use super::ModelConfig;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMFG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn tensor_table(params: &ModelParams<f32>) -> Vec<(&'static str, Vec<usize>, Vec<f32>)> {
    let mut out = vec![(
        "embedding",
        params.embedding.values.shape().to_vec(),
        params.embedding.values.iter().copied().collect(),
    )];
    for (name, v) in params.weights.views(params.config.embed_dim) {
        out.push((name, v.shape().to_vec(), v.iter().copied().collect()));
    }
    out.push((
        "bn_moving_mean",
        params.bn_moving_mean.shape().to_vec(),
        params.bn_moving_mean.to_vec(),
    ));
    out.push((
        "bn_moving_var",
        params.bn_moving_var.shape().to_vec(),
        params.bn_moving_var.to_vec(),
    ));
    out
}

pub fn write_checkpoint(params: &ModelParams<f32>, mut w: impl Write) -> std::io::Result<()> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        c.seq_len,
        c.embed_dim,
        c.conv_filters,
        c.conv_kernel,
        c.pool_size,
        c.lstm_units,
        c.dense_units,
        c.num_labels,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[c.use_attention as u8])?;
    for v in [c.dropout_rate, c.bn_momentum, c.bn_epsilon] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(params.vocab_size() as u64).to_le_bytes())?;
    let table = tensor_table(params);
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for (name, shape, values) in table {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

/// Shapes the tensor table must have for `config` and `vocab_size`.
fn expected_shapes(config: &ModelConfig, vocab_size: usize) -> Vec<(&'static str, Vec<usize>)> {
    let w = Weights::<f32>::zeros(config);
    let mut out = vec![("embedding", vec![vocab_size, config.embed_dim])];
    out.extend(
        w.views(config.embed_dim)
            .into_iter()
            .map(|(n, v)| (n, v.shape().to_vec())),
    );
    out.push(("bn_moving_mean", vec![config.conv_filters]));
    out.push(("bn_moving_var", vec![config.conv_filters]));
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    read_checked(bytes, None)
}

fn read_checked(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        seq_len: dims[0],
        embed_dim: dims[1],
        conv_filters: dims[2],
        conv_kernel: dims[3],
        pool_size: dims[4],
        lstm_units: dims[5],
        dense_units: dims[6],
        num_labels: dims[7],
        use_attention: r.u8()? != 0,
        dropout_rate: r.f64()?,
        bn_momentum: r.f64()?,
        bn_epsilon: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config block: {e}")))?;
    let vocab_size = r.u64()? as usize;

    let shapes = expected_shapes(&config, vocab_size);
    if let Some(want) = expected {
        // Compare tensor by tensor so the error names what differs.
        let want_shapes = expected_shapes(want, vocab_size);
        for (name, shape) in &want_shapes {
            match shapes.iter().find(|(n, _)| n == name) {
                Some((_, got)) if got == shape => {}
                Some((_, got)) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {got:?}, model expects {shape:?}"
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("tensor `{name}` missing from checkpoint")))
                }
            }
        }
        if let Some((name, _)) = shapes.iter().find(|(n, _)| !want_shapes.iter().any(|(m, _)| m == n)) {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not part of the model")));
        }
        if want != &config {
            return Err(Error::Checkpoint("checkpoint hyperparameters differ from the model configuration".into()));
        }
    }

    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            shapes.len()
        )));
    }
    let mut embedding = Array2::<f32>::zeros((vocab_size, config.embed_dim));
    let mut weights = Weights::<f32>::zeros(&config);
    let mut mean = Array1::<f32>::zeros(config.conv_filters);
    let mut var = Array1::<f32>::zeros(config.conv_filters);
    {
        let mut slots: Vec<(&'static str, ArrayViewMutD<f32>)> = vec![("embedding", embedding.view_mut().into_dyn())];
        slots.extend(weights.views_mut());
        slots.push(("bn_moving_mean", mean.view_mut().into_dyn()));
        slots.push(("bn_moving_var", var.view_mut().into_dyn()));

        for (slot, (want_name, want_shape)) in slots.iter_mut().zip(&shapes) {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            if name != *want_name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{want_name}`, found `{name}`"
                )));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, expected {want_shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            for (d, chunk) in slot.1.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    Ok(ModelParams {
        config,
        embedding: Arc::new(EmbeddingMatrix { values: embedding }),
        weights,
        bn_moving_mean: mean,
        bn_moving_var: var,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Loads a checkpoint and verifies it matches `config`, naming the first
/// tensor whose shape differs.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checked(&bytes, Some(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(attention: bool) -> ModelParams<f32> {
        let cfg = ModelConfig {
            embed_dim: 6,
            conv_filters: 4,
            lstm_units: 3,
            dense_units: 5,
            use_attention: attention,
            ..Default::default()
        };
        let mut p = ModelParams::init(&cfg, Arc::new(EmbeddingMatrix::random(11, 6, 2)), 9).unwrap();
        p.bn_moving_mean.fill(0.125);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for attn in [true, false] {
            let p = small(attn);
            let mut a = Vec::new();
            write_checkpoint(&p, &mut a).unwrap();
            let back = read_checkpoint(&a).unwrap();
            assert_eq!(back, p);
            let mut b = Vec::new();
            write_checkpoint(&back, &mut b).unwrap();
            assert_eq!(a, b);
            assert_eq!(&a[..4], b"EMFG");
        }
    }

    #[test]
    fn truncation_is_reported() {
        let mut a = Vec::new();
        write_checkpoint(&small(true), &mut a).unwrap();
        for cut in [3, 10, a.len() / 2, a.len() - 1] {
            let err = read_checkpoint(&a[..cut]).unwrap_err();
            assert!(err.to_string().contains("unexpected end of checkpoint"), "{err}");
        }
    }

    #[test]
    fn version_and_config_mismatch() {
        let p = small(true);
        let mut a = Vec::new();
        write_checkpoint(&p, &mut a).unwrap();
        let mut bad = a.clone();
        bad[4] = 99;
        assert!(read_checkpoint(&bad).unwrap_err().to_string().contains("version"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, &a).unwrap();
        let other = ModelConfig {
            conv_filters: 8,
            ..p.config.clone()
        };
        let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
        assert!(err.contains("conv_kernel"), "{err}");
        assert!(load_checkpoint_for(&path, &p.config).is_ok());
        let no_attn = ModelConfig {
            use_attention: false,
            ..p.config.clone()
        };
        let err = load_checkpoint_for(&path, &no_attn).unwrap_err().to_string();
        assert!(err.contains("attn_w"), "{err}");
    }
}
