//! Corpus ingestion, text normalization, tokenization and fixed-length encoding.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::{NUM_LABELS, SEQ_LEN};

/// Token id used for left padding.
pub const PAD_ID: u32 = 0;
/// Token id for tokens never seen in the training split.
pub const OOV_ID: u32 = 1;

/// GoEmotions category names in their canonical index order.
pub const GOEMOTIONS_LABELS: [&str; NUM_LABELS] = [
    "admiration",
    "amusement",
    "anger",
    "annoyance",
    "approval",
    "caring",
    "confusion",
    "curiosity",
    "desire",
    "disappointment",
    "disapproval",
    "disgust",
    "embarrassment",
    "excitement",
    "fear",
    "gratitude",
    "grief",
    "joy",
    "love",
    "nervousness",
    "optimism",
    "pride",
    "realization",
    "relief",
    "remorse",
    "sadness",
    "surprise",
    "neutral",
];

/// Ordered set of the 28 emotion category names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != NUM_LABELS {
            return Err(Error::Data(format!(
                "label vocabulary must have exactly {NUM_LABELS} entries, found {}",
                names.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Data(format!("empty label name at index {i}")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate label name `{name}`")));
            }
        }
        Ok(LabelVocabulary { names, index })
    }

    pub fn goemotions() -> Self {
        Self::new(GOEMOTIONS_LABELS.iter().map(|s| s.to_string()).collect())
            .expect("builtin label list is valid")
    }

    /// Reads one name per line. Blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub text: String,
    pub labels: BTreeSet<usize>,
}

impl Sample {
    pub fn new(text: impl Into<String>, labels: impl IntoIterator<Item = usize>) -> Self {
        Sample {
            text: text.into(),
            labels: labels.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Lines starting with `#` that contain no tab are comment/header lines.
pub(crate) fn is_comment(line: &str) -> bool {
    line.starts_with('#') && !line.contains('\t')
}

/// Loads a `text<TAB>labels[<TAB>id]` corpus file.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), vocab)
}

pub fn parse_dataset(reader: impl BufRead, vocab: &LabelVocabulary) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || is_comment(line) {
            continue;
        }
        let mut fields = line.split('\t');
        let text = fields.next().unwrap_or_default();
        let label_field = fields
            .next()
            .ok_or_else(|| Error::parse(lineno, "expected `text<TAB>labels`"))?;
        // optional id column
        let _ = fields.next();
        if fields.next().is_some() {
            return Err(Error::parse(lineno, "too many columns"));
        }
        let mut labels = BTreeSet::new();
        for tok in label_field.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            let idx: usize = tok
                .parse()
                .map_err(|_| Error::parse(lineno, format!("invalid label index `{tok}`")))?;
            if idx >= vocab.len() {
                return Err(Error::parse(lineno, "label index out of range"));
            }
            labels.insert(idx);
        }
        if labels.is_empty() {
            return Err(Error::parse(lineno, "missing labels"));
        }
        samples.push(Sample {
            text: text.to_string(),
            labels,
        });
    }
    Ok(samples)
}

/// Writes samples in the corpus TSV format. Tabs and newlines inside texts
/// are replaced by spaces.
pub fn write_dataset(mut w: impl Write, samples: &[Sample]) -> std::io::Result<()> {
    for s in samples {
        let text: String = s
            .text
            .chars()
            .map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c })
            .collect();
        let labels: Vec<String> = s.labels.iter().map(|l| l.to_string()).collect();
        writeln!(w, "{}\t{}", text, labels.join(","))?;
    }
    Ok(())
}

fn is_link(token: &str) -> bool {
    token.starts_with("http://") || token.starts_with("https://") || token.starts_with("www.")
}

/// Strips mentions, links and punctuation, lowercases and collapses whitespace.
///
/// Lowercasing happens before the character filter: a few uppercase letters
/// lowercase into a letter plus a combining mark, and filtering afterwards
/// keeps the function idempotent.
pub fn normalize_text(raw: &str) -> String {
    let kept: Vec<&str> = raw
        .split_whitespace()
        .filter(|t| !t.starts_with('@') && !is_link(t))
        .collect();
    let lowered = kept.join(" ").to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word-to-id mapping fitted on the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerState {
    word_index: HashMap<String, u32>,
    /// Tokens ordered by id (id = position + 2) with their training counts.
    words: Vec<(String, usize)>,
    fitted_on: Split,
}

impl TokenizerState {
    pub fn vocab_size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn fitted_on(&self) -> Split {
        self.fitted_on
    }

    pub fn id(&self, token: &str) -> u32 {
        self.word_index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.word_index.get(token).copied()
    }

    pub fn word_index(&self) -> &HashMap<String, u32> {
        &self.word_index
    }

    /// Token for `id`, if it is a vocabulary id (not padding or OOV).
    pub fn token(&self, id: u32) -> Option<&str> {
        (id as usize)
            .checked_sub(2)
            .and_then(|i| self.words.get(i))
            .map(|(w, _)| w.as_str())
    }

    /// `(token, training count)` in id order.
    pub fn words(&self) -> &[(String, usize)] {
        &self.words
    }

    /// Token ids for `text`, truncated to the last `SEQ_LEN` tokens and
    /// left-padded with [`PAD_ID`].
    pub fn encode_text(&self, text: &str) -> [u32; SEQ_LEN] {
        let ids: Vec<u32> = text.split_whitespace().map(|t| self.id(t)).collect();
        let tail = &ids[ids.len().saturating_sub(SEQ_LEN)..];
        let mut out = [PAD_ID; SEQ_LEN];
        out[SEQ_LEN - tail.len()..].copy_from_slice(tail);
        out
    }

    /// `token<TAB>id<TAB>count`, one line per token in id order.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, (word, count)) in self.words.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}", word, i + 2, count)?;
        }
        Ok(())
    }

    pub fn read_tsv(reader: impl BufRead) -> Result<Self> {
        let mut words = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            if line.is_empty() || is_comment(&line) {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::parse(lineno, "expected `token<TAB>id<TAB>count`"));
            }
            let id: usize = parts[1]
                .parse()
                .map_err(|_| Error::parse(lineno, "invalid token id"))?;
            let count: usize = parts[2]
                .parse()
                .map_err(|_| Error::parse(lineno, "invalid token count"))?;
            if id != words.len() + 2 {
                return Err(Error::parse(lineno, "token ids must be contiguous from 2"));
            }
            words.push((parts[0].to_string(), count));
        }
        Ok(Self::from_words(words))
    }

    fn from_words(words: Vec<(String, usize)>) -> Self {
        let word_index = words
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i as u32 + 2))
            .collect();
        TokenizerState {
            word_index,
            words,
            fitted_on: Split::Train,
        }
    }
}

fn token_counts<'a>(texts: impl Iterator<Item = &'a str>) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in texts {
        for tok in text.split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Builds the vocabulary from already-normalized training texts. Ids start
/// at 2 in order of descending frequency, ties broken lexicographically.
pub fn fit_tokenizer(train: &[Sample]) -> Result<TokenizerState> {
    if train.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    Ok(TokenizerState::from_words(token_counts(
        train.iter().map(|s| s.text.as_str()),
    )))
}

/// Padded token-id sequences and binary label rows for one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    /// N x `SEQ_LEN`.
    pub sequences: Array2<u32>,
    /// N x label count, entries 0 or 1.
    pub labels: Array2<u8>,
    pub split: Split,
}

impl EncodedDataset {
    pub fn new(sequences: Array2<u32>, labels: Array2<u8>, split: Split) -> Result<Self> {
        if sequences.nrows() != labels.nrows() {
            return Err(Error::Shape(format!(
                "{} sequences but {} label rows",
                sequences.nrows(),
                labels.nrows()
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::Data("label matrix must be binary".into()));
        }
        Ok(EncodedDataset {
            sequences,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows in the given order (duplicates allowed).
    pub fn select(&self, rows: &[usize]) -> EncodedDataset {
        EncodedDataset {
            sequences: self.sequences.select(ndarray::Axis(0), rows),
            labels: self.labels.select(ndarray::Axis(0), rows),
            split: self.split,
        }
    }

    /// Largest token id plus one; zero for an empty dataset.
    pub fn max_id_bound(&self) -> usize {
        self.sequences.iter().map(|&v| v as usize + 1).max().unwrap_or(0)
    }

    /// Writes `id0 ... id29<TAB>labels` per row.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        for (seq, lab) in self.sequences.rows().into_iter().zip(self.labels.rows()) {
            let ids: Vec<String> = seq.iter().map(|v| v.to_string()).collect();
            let labels: Vec<String> = lab
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(j, _)| j.to_string())
                .collect();
            writeln!(w, "{}\t{}", ids.join(" "), labels.join(","))?;
        }
        Ok(())
    }

    pub fn read_tsv(reader: impl BufRead, split: Split, num_labels: usize) -> Result<Self> {
        let mut seqs: Vec<u32> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        let mut n = 0;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            if line.is_empty() || is_comment(&line) {
                continue;
            }
            let (ids, labs) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected `ids<TAB>labels`"))?;
            let before = seqs.len();
            for tok in ids.split(' ') {
                seqs.push(
                    tok.parse()
                        .map_err(|_| Error::parse(lineno, format!("invalid token id `{tok}`")))?,
                );
            }
            if seqs.len() - before != SEQ_LEN {
                return Err(Error::parse(
                    lineno,
                    format!("expected {SEQ_LEN} token ids"),
                ));
            }
            let mut row = vec![0u8; num_labels];
            for tok in labs.split(',').filter(|t| !t.is_empty()) {
                let j: usize = tok
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("invalid label index `{tok}`")))?;
                if j >= num_labels {
                    return Err(Error::parse(lineno, "label index out of range"));
                }
                row[j] = 1;
            }
            labels.extend(row);
            n += 1;
        }
        Self::new(
            Array2::from_shape_vec((n, SEQ_LEN), seqs).expect("row-major sequences"),
            Array2::from_shape_vec((n, num_labels), labels).expect("row-major labels"),
            split,
        )
    }
}

/// Encodes samples against a fitted tokenizer. The tokenizer is only read.
pub fn encode(
    samples: &[Sample],
    tok: &TokenizerState,
    vocab: &LabelVocabulary,
    split: Split,
) -> EncodedDataset {
    let n = samples.len();
    let mut sequences = Array2::<u32>::zeros((n, SEQ_LEN));
    let mut labels = Array2::<u8>::zeros((n, vocab.len()));
    for (i, s) in samples.iter().enumerate() {
        let ids = tok.encode_text(&s.text);
        sequences
            .row_mut(i)
            .iter_mut()
            .zip(ids)
            .for_each(|(d, v)| *d = v);
        for &j in &s.labels {
            labels[[i, j]] = 1;
        }
    }
    EncodedDataset {
        sequences,
        labels,
        split,
    }
}

/// Positive count per label column.
pub fn label_counts(labels: &Array2<u8>) -> Vec<usize> {
    labels
        .columns()
        .into_iter()
        .map(|c| c.iter().filter(|&&v| v == 1).count())
        .collect()
}

pub fn label_distribution(ds: &EncodedDataset) -> Vec<usize> {
    label_counts(&ds.labels)
}

/// The `k` most frequent tokens, ties in lexicographic order.
pub fn top_k_words(samples: &[Sample], k: usize) -> Vec<(String, usize)> {
    let mut ranked = token_counts(samples.iter().map(|s| s.text.as_str()));
    ranked.truncate(k);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::goemotions()
    }

    #[test]
    fn parses_single_and_multi_labels() {
        let v = vocab();
        let s = parse_dataset("I love it\t18\nmixed news\t17,25\tabc123\n".as_bytes(), &v).unwrap();
        assert_eq!(s[0], Sample::new("I love it", [18]));
        assert_eq!(s[1], Sample::new("mixed news", [17, 25]));
        assert_eq!(v.name(18), "love");
    }

    #[test]
    fn rejects_out_of_range_label() {
        let err = parse_dataset("oops\t99\n".as_bytes(), &vocab()).unwrap_err();
        assert_eq!(err.to_string(), "label index out of range, line 1");
    }

    #[test]
    fn reports_malformed_line_number() {
        let err = parse_dataset("ok\t1\nno tab here\n".as_bytes(), &vocab()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn skips_header_comments() {
        let s = parse_dataset("# seed=1\nhi\t0\n".as_bytes(), &vocab()).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn vocabulary_must_have_28_unique_names() {
        assert!(LabelVocabulary::new(vec!["a".into(); 3]).is_err());
        let mut names: Vec<String> = GOEMOTIONS_LABELS.iter().map(|s| s.to_string()).collect();
        names[1] = names[0].clone();
        assert!(LabelVocabulary::new(names).is_err());
        let v = vocab();
        for (i, n) in v.names().iter().enumerate() {
            assert_eq!(v.index_of(n), Some(i));
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("@bob check https://t.co/x GREAT!!!"), "check great");
        assert_eq!(normalize_text("already clean text"), "already clean text");
        assert_eq!(normalize_text("good news... bad news :("), "good news bad news");
        assert_eq!(normalize_text("see www.x.com now"), "see now");
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn tokenizer_orders_by_frequency_then_lexically() {
        let tok = fit_tokenizer(&[Sample::new("a b", [0]), Sample::new("a", [0])]).unwrap();
        assert_eq!(tok.get("a"), Some(2));
        assert_eq!(tok.get("b"), Some(3));
        assert_eq!(tok.vocab_size(), 4);

        let tok = fit_tokenizer(&[Sample::new("y y", [0]), Sample::new("x x", [0])]).unwrap();
        assert_eq!(tok.get("x"), Some(2));
        assert_eq!(tok.get("y"), Some(3));
        assert_eq!(tok.fitted_on(), Split::Train);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(fit_tokenizer(&[]).unwrap_err().to_string(), "empty corpus");
    }

    #[test]
    fn encode_pads_left_and_maps_oov() {
        let v = vocab();
        let tok = fit_tokenizer(&[Sample::new("a b", [0])]).unwrap();
        let ds = encode(
            &[Sample::new("a b", [0, 27]), Sample::new("zzz a", [3])],
            &tok,
            &v,
            Split::Val,
        );
        let mut expected = vec![0u32; 28];
        expected.extend([2, 3]);
        assert_eq!(ds.sequences.row(0).to_vec(), expected);
        assert_eq!(ds.sequences[[1, 28]], OOV_ID);
        assert_eq!(ds.sequences[[1, 29]], 2);
        let row0: Vec<u8> = ds.labels.row(0).to_vec();
        assert_eq!(row0.iter().map(|&x| x as usize).sum::<usize>(), 2);
        assert_eq!((row0[0], row0[27]), (1, 1));
    }

    #[test]
    fn encode_keeps_last_tokens() {
        let text: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let s = Sample::new(text.join(" "), [0]);
        let tok = fit_tokenizer(std::slice::from_ref(&s)).unwrap();
        let ds = encode(&[s], &tok, &vocab(), Split::Train);
        assert_eq!(tok.token(ds.sequences[[0, 0]]), Some("w10"));
        assert_eq!(tok.token(ds.sequences[[0, 29]]), Some("w39"));
    }

    #[test]
    fn distribution_counts() {
        let ds = EncodedDataset::new(
            Array2::zeros((2, SEQ_LEN)),
            ndarray::array![[1, 0], [1, 1]],
            Split::Train,
        )
        .unwrap();
        assert_eq!(label_distribution(&ds), vec![2, 1]);
        let empty = EncodedDataset::new(
            Array2::zeros((0, SEQ_LEN)),
            Array2::zeros((0, NUM_LABELS)),
            Split::Train,
        )
        .unwrap();
        assert_eq!(label_distribution(&empty), vec![0; NUM_LABELS]);
        let full = EncodedDataset::new(
            Array2::zeros((5, SEQ_LEN)),
            Array2::ones((5, NUM_LABELS)),
            Split::Train,
        )
        .unwrap();
        assert_eq!(label_distribution(&full), vec![5; NUM_LABELS]);
    }

    #[test]
    fn top_words() {
        assert_eq!(top_k_words(&[Sample::new("a a b", [0])], 1), vec![("a".into(), 2)]);
        assert_eq!(top_k_words(&[Sample::new("a a b", [0])], 10).len(), 2);
        assert_eq!(
            top_k_words(&[Sample::new("b a", [0])], 2),
            vec![("a".into(), 1), ("b".into(), 1)]
        );
    }

    #[test]
    fn tokenizer_and_encoded_tsv_round_trip() {
        let v = vocab();
        let samples = [Sample::new("a b c a", [1]), Sample::new("c", [2, 5])];
        let tok = fit_tokenizer(&samples).unwrap();
        let mut buf = Vec::new();
        tok.write_tsv(&mut buf).unwrap();
        assert_eq!(TokenizerState::read_tsv(buf.as_slice()).unwrap(), tok);

        let ds = encode(&samples, &tok, &v, Split::Test);
        let mut buf = Vec::new();
        ds.write_tsv(&mut buf).unwrap();
        let back = EncodedDataset::read_tsv(buf.as_slice(), Split::Test, NUM_LABELS).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,60}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }

        #[test]
        fn encode_shape_and_id_bound(texts in proptest::collection::vec("[a-e ]{0,80}", 1..8),
                                     probe in "[a-h ]{0,80}") {
            let train: Vec<Sample> = texts.iter().map(|t| Sample::new(t.clone(), [0])).collect();
            let tok = fit_tokenizer(&train).unwrap();
            let snapshot = tok.clone();
            let ds = encode(&[Sample::new(probe, [1])], &tok, &vocab(), Split::Test);
            prop_assert_eq!(ds.sequences.dim(), (1, SEQ_LEN));
            prop_assert_eq!(ds.labels.dim(), (1, NUM_LABELS));
            prop_assert!(ds.max_id_bound() <= tok.vocab_size());
            prop_assert_eq!(&tok, &snapshot);
            prop_assert_eq!(fit_tokenizer(&train).unwrap(), tok);
        }
    }
}
