//! FastText `.vec` parsing, frozen embedding matrix construction and label
//! cosine similarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{normalize_text, LabelVocabulary, TokenizerState, OOV_ID};
use crate::error::{Error, Result};
use crate::netcore::Real;

/// Embedding width used by the full model.
pub const EMBED_DIM: usize = 300;

/// Half-width of the uniform range for rows with no pretrained vector.
pub const UNKNOWN_ROW_SCALE: f32 = 0.05;

/// Pretrained word vectors keyed by token.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl WordVectors {
    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Loads a text `.vec` file. When `expected_dim` is given the header
/// dimension must match it.
pub fn load_vec(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<WordVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_vec(BufReader::new(file), expected_dim)
}

pub fn parse_vec(reader: impl BufRead, expected_dim: Option<usize>) -> Result<WordVectors> {
    let mut lines = reader.lines().enumerate();
    let (count, dim) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::Data("missing header".into()));
        };
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [v, d] => v.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
            _ => None,
        };
        break parsed.ok_or_else(|| Error::parse(i + 1, "missing header: expected `count dim`"))?;
    };
    if let Some(want) = expected_dim {
        if dim != want {
            return Err(Error::Data(format!(
                "vector dimension {dim} does not match expected {want}"
            )));
        }
    }

    let mut vectors = HashMap::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("nonblank line has a token");
        let values = parts
            .map(|v| {
                v.parse::<f32>()
                    .map_err(|_| Error::parse(lineno, format!("non-numeric component `{v}`")))
            })
            .collect::<Result<Vec<f32>>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} components, found {}", values.len()),
            ));
        }
        vectors.insert(token.to_string(), values);
    }
    if vectors.len() != count {
        return Err(Error::Data(format!(
            "header announces {count} vectors, found {}",
            vectors.len()
        )));
    }
    Ok(WordVectors { dim, vectors })
}

/// Frozen `vocab_size x dim` lookup table. Row 0 is padding and always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T = f32> {
    pub values: Array2<T>,
}

impl<T: Real> EmbeddingMatrix<T> {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            values: Array2::zeros((vocab_size, dim)),
        }
    }

    /// Rows 1.. drawn uniformly from `[-0.05, 0.05]`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Array2::zeros((vocab_size, dim));
        for mut row in values.rows_mut().into_iter().skip(1) {
            for v in row.iter_mut() {
                *v = T::of(rng.random_range(-UNKNOWN_ROW_SCALE..=UNKNOWN_ROW_SCALE) as f64);
            }
        }
        EmbeddingMatrix { values }
    }

    pub fn vocab_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Embedding rows are never updated by the optimizer.
    pub fn trainable(&self) -> bool {
        false
    }

    pub fn cast<U: Real>(&self) -> EmbeddingMatrix<U> {
        EmbeddingMatrix {
            values: self.values.mapv(|v| U::of(v.to_f64().expect("finite"))),
        }
    }
}

/// Places pretrained vectors at their token ids. Padding stays zero; OOV and
/// tokens missing from `vecs` get seeded uniform rows.
pub fn build_matrix(
    vecs: &WordVectors,
    tok: &TokenizerState,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix<f32>> {
    if vecs.dim != dim {
        return Err(Error::Data(format!(
            "word vectors have dimension {}, model expects {dim}",
            vecs.dim
        )));
    }
    let mut m = EmbeddingMatrix::<f32>::random(tok.vocab_size(), dim, seed);
    for (i, (word, _)) in tok.words().iter().enumerate() {
        if let Some(v) = vecs.get(word) {
            m.values
                .row_mut(i + 2)
                .iter_mut()
                .zip(v)
                .for_each(|(d, s)| *d = *s);
        }
    }
    Ok(m)
}

/// Pairwise cosine similarity. Fails on a zero-norm vector.
pub fn cosine_similarity_matrix(vectors: &[Vec<f64>]) -> Result<Array2<f64>> {
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Numeric(format!("vector {i} has zero norm")));
    }
    let k = vectors.len();
    let mut m = Array2::zeros((k, k));
    for i in 0..k {
        m[[i, i]] = 1.0;
        for j in i + 1..k {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[[i, j]] = c;
            m[[j, i]] = c;
        }
    }
    Ok(m)
}

/// One vector per label: the mean embedding row over the tokens of the label
/// name (unknown tokens use the OOV row).
pub fn label_vectors(
    matrix: &EmbeddingMatrix<f32>,
    tok: &TokenizerState,
    vocab: &LabelVocabulary,
) -> Vec<Vec<f64>> {
    vocab
        .names()
        .iter()
        .map(|name| {
            let norm = normalize_text(name);
            let ids: Vec<u32> = match norm.split_whitespace().map(|t| tok.id(t)).collect::<Vec<_>>() {
                v if v.is_empty() => vec![OOV_ID],
                v => v,
            };
            let mut acc = vec![0.0f64; matrix.dim()];
            for &id in &ids {
                for (a, &v) in acc.iter_mut().zip(matrix.values.row(id as usize)) {
                    *a += v as f64;
                }
            }
            acc.iter().map(|a| a / ids.len() as f64).collect()
        })
        .collect()
}
