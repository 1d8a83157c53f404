//! Seeded synthetic corpora for smoke tests, benchmarks and demos.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode, fit_tokenizer, EncodedDataset, LabelVocabulary, Sample, Split, TokenizerState};
use crate::embeddings::EmbeddingMatrix;
use crate::error::Result;
use crate::NUM_LABELS;

/// Distinct marker words per label.
const KEYWORDS_PER_LABEL: usize = 1;
const FILLER_WORDS: usize = 200;

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct EncodedToyCorpus {
    pub tokenizer: TokenizerState,
    pub train: EncodedDataset,
    pub val: EncodedDataset,
    pub test: EncodedDataset,
}

fn keyword(label: usize, k: usize) -> String {
    format!("kw{label}x{k}")
}

fn toy_sample(rng: &mut impl Rng) -> Sample {
    let n_labels = match rng.random_range(0..20) {
        0 => 3,
        1..=5 => 2,
        _ => 1,
    };
    let mut labels: Vec<usize> = (0..NUM_LABELS).collect();
    labels.shuffle(rng);
    labels.truncate(n_labels);
    let mut words: Vec<String> = labels
        .iter()
        .map(|&l| keyword(l, rng.random_range(0..KEYWORDS_PER_LABEL)))
        .collect();
    for _ in 0..rng.random_range(4..16) {
        words.push(format!("w{}", rng.random_range(0..FILLER_WORDS)));
    }
    words.shuffle(rng);
    Sample::new(words.join(" "), labels)
}

/// Every sample carries one to three labels, each signalled by one of that
/// label's marker words among random filler words.
pub fn keyword_corpus(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| toy_sample(&mut rng)).collect::<Vec<_>>();
    ToyCorpus {
        train: draw(n_train),
        val: draw(n_val),
        test: draw(n_test),
    }
}

impl ToyCorpus {
    pub fn encode(&self) -> Result<EncodedToyCorpus> {
        let vocab = LabelVocabulary::goemotions();
        let tokenizer = fit_tokenizer(&self.train)?;
        Ok(EncodedToyCorpus {
            train: encode(&self.train, &tokenizer, &vocab, Split::Train),
            val: encode(&self.val, &tokenizer, &vocab, Split::Val),
            test: encode(&self.test, &tokenizer, &vocab, Split::Test),
            tokenizer,
        })
    }
}

/// Frozen vectors for a toy vocabulary, components uniform in
/// `[-scale, scale]`; row 0 stays zero.
pub fn toy_embedding(vocab_size: usize, dim: usize, scale: f32, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((vocab_size, dim));
    for mut row in values.rows_mut().into_iter().skip(1) {
        row.mapv_inplace(|_: f32| rng.random_range(-scale..=scale));
    }
    EmbeddingMatrix { values }
}

/// Label counts spaced geometrically from `min` to `max` over all labels.
pub fn skewed_counts(min: usize, max: usize) -> Vec<usize> {
    let ratio = (max as f64 / min as f64).powf(1.0 / (NUM_LABELS - 1) as f64);
    (0..NUM_LABELS)
        .map(|j| (min as f64 * ratio.powi(j as i32)).round() as usize)
        .collect()
}

/// Single-label samples with exactly `counts[j]` rows of label `j`, shuffled.
pub fn skewed_corpus(counts: &[usize], seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Sample> = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &c)| (0..c).map(move |i| Sample::new(format!("{} row{i}", keyword(j, 0)), [j])))
        .collect();
    out.shuffle(&mut rng);
    out
}
