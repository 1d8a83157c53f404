//! Label balancing and weak-supervision quality gates.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{label_counts, EncodedDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::NUM_LABELS;

/// Default probability cutoff for turning annotator output into proposed labels.
pub const DEFAULT_WEAK_CUTOFF: f32 = 0.5;
/// Every proposed label must score strictly above this to pass the gate.
pub const DEFAULT_ALIGNMENT_THRESHOLD: f32 = 0.7;

/// A text labeled by an automatic annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakLabeledSample {
    pub text: String,
    pub prob: Vec<f32>,
    pub proposed: BTreeSet<usize>,
}

impl WeakLabeledSample {
    pub fn from_probs(text: impl Into<String>, prob: Vec<f32>, cutoff: f32) -> Result<Self> {
        let proposed = weak_labels_from_probs(&prob, cutoff)?;
        Ok(WeakLabeledSample {
            text: text.into(),
            prob,
            proposed,
        })
    }
}

/// One reviewer's label set for a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorVote {
    pub annotator_id: u32,
    pub labels: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceConfig {
    /// Per-label target count; `None` means the largest label count in the input.
    pub target: Option<usize>,
    pub seed: u64,
    /// Maximum number of times one original row may appear in the output.
    pub max_duplication_factor: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            target: None,
            seed: 42,
            max_duplication_factor: 100,
        }
    }
}

/// Anything that maps a text to per-label probabilities.
pub trait Annotator {
    fn annotate(&self, text: &str) -> Vec<f32>;
}

/// Deterministic stand-in annotator: probabilities are derived from an
/// FNV-1a hash of the text, so identical texts always get identical output.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashAnnotator {
    pub salt: u64,
}

impl Annotator for HashAnnotator {
    fn annotate(&self, text: &str) -> Vec<f32> {
        (0..NUM_LABELS)
            .map(|j| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.salt;
                for b in text.bytes().chain((j as u32).to_le_bytes()) {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
                // avalanche so neighbouring labels decorrelate
                h ^= h >> 33;
                h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
                h ^= h >> 33;
                (h % 10_001) as f32 / 10_000.0
            })
            .collect()
    }
}

pub fn annotate_all(annotator: &impl Annotator, texts: &[String], cutoff: f32) -> Result<Vec<WeakLabeledSample>> {
    texts
        .iter()
        .map(|t| WeakLabeledSample::from_probs(t.clone(), annotator.annotate(t), cutoff))
        .collect()
}

/// Labels whose probability reaches `cutoff` (inclusive).
pub fn weak_labels_from_probs(prob: &[f32], cutoff: f32) -> Result<BTreeSet<usize>> {
    if prob.len() != NUM_LABELS {
        return Err(Error::Shape(format!(
            "annotator output has {} entries, expected {NUM_LABELS}",
            prob.len()
        )));
    }
    Ok(prob
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cutoff)
        .map(|(j, _)| j)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    Reject,
}

/// Accepts a weak sample iff its least confident proposed label scores
/// strictly above `threshold`.
pub fn alignment_gate(sample: &WeakLabeledSample, threshold: f32) -> Result<GateDecision> {
    let mut min = f32::INFINITY;
    for &j in &sample.proposed {
        let p = *sample
            .prob
            .get(j)
            .ok_or_else(|| Error::Data(format!("proposed label {j} has no probability")))?;
        min = min.min(p);
    }
    if sample.proposed.is_empty() {
        return Err(Error::Data("alignment gate needs a nonempty proposed label set".into()));
    }
    Ok(if min > threshold {
        GateDecision::Accept
    } else {
        GateDecision::Reject
    })
}

/// Labels chosen by strictly more than half of the voters.
pub fn majority_vote(votes: &[AnnotatorVote]) -> BTreeSet<usize> {
    let mut tally: HashMap<usize, usize> = HashMap::new();
    for v in votes {
        for &j in &v.labels {
            *tally.entry(j).or_default() += 1;
        }
    }
    tally
        .into_iter()
        .filter(|&(_, n)| 2 * n > votes.len())
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateStats {
    pub total: usize,
    pub no_proposal: usize,
    pub misaligned: usize,
    pub vote_rejected: usize,
    pub accepted: usize,
}

/// Runs every weak sample through the alignment gate and, when reviewer votes
/// exist for it (keyed by position in `weak`), replaces its labels with the
/// majority decision.
pub fn gate_weak_samples(
    weak: &[WeakLabeledSample],
    votes: &HashMap<usize, Vec<AnnotatorVote>>,
    alignment_threshold: f32,
) -> Result<(Vec<Sample>, GateStats)> {
    let mut stats = GateStats {
        total: weak.len(),
        ..Default::default()
    };
    let mut accepted = Vec::new();
    for (i, w) in weak.iter().enumerate() {
        if w.proposed.is_empty() {
            stats.no_proposal += 1;
            continue;
        }
        if alignment_gate(w, alignment_threshold)? == GateDecision::Reject {
            stats.misaligned += 1;
            continue;
        }
        let labels = match votes.get(&i) {
            Some(v) if !v.is_empty() => majority_vote(v),
            _ => w.proposed.clone(),
        };
        if labels.is_empty() {
            stats.vote_rejected += 1;
            continue;
        }
        stats.accepted += 1;
        accepted.push(Sample {
            text: w.text.clone(),
            labels,
        });
    }
    Ok((accepted, stats))
}

/// Row indices of the balanced dataset: every original row in order, then
/// the appended duplicates in selection order.
///
/// Labels are visited once in ascending order of their initial count (ties
/// by index). While a label is below target, a uniformly chosen original row
/// carrying it is duplicated, which also increments every other label on that
/// row, so counts may overshoot the target.
pub fn oversample_indices(labels: &Array2<u8>, cfg: &BalanceConfig) -> Result<Vec<usize>> {
    if cfg.max_duplication_factor == 0 {
        return Err(Error::Config("max_duplication_factor must be at least 1".into()));
    }
    let mut counts = label_counts(labels);
    let target = match cfg.target {
        Some(0) => return Err(Error::Config("balance target must be at least 1".into())),
        Some(t) => t,
        None => counts.iter().copied().max().unwrap_or(0),
    };
    let n = labels.nrows();
    let mut copies = vec![1usize; n];
    let mut out: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..labels.ncols()).collect();
    order.sort_by_key(|&j| (counts[j], j));

    for j in order {
        if counts[j] >= target {
            continue;
        }
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&i| labels[[i, j]] == 1 && copies[i] < cfg.max_duplication_factor)
            .collect();
        while counts[j] < target && !candidates.is_empty() {
            let pick = rng.random_range(0..candidates.len());
            let row = candidates[pick];
            out.push(row);
            copies[row] += 1;
            for (c, &v) in counts.iter_mut().zip(labels.row(row)) {
                *c += v as usize;
            }
            if copies[row] >= cfg.max_duplication_factor {
                candidates.swap_remove(pick);
            }
        }
    }
    Ok(out)
}

/// Oversamples the training split. Validation and test splits are refused.
pub fn oversample_balance(ds: &EncodedDataset, cfg: &BalanceConfig) -> Result<EncodedDataset> {
    if ds.split != Split::Train {
        return Err(Error::Data("balancing restricted to training split".into()));
    }
    let rows = oversample_indices(&ds.labels, cfg)?;
    Ok(ds.select(&rows))
}

/// Reads `text,p0,...,p27` with a header row.
pub fn read_weak_csv(reader: impl Read, cutoff: f32) -> Result<Vec<WeakLabeledSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        if rec.len() != NUM_LABELS + 1 {
            return Err(Error::parse(
                line,
                format!("expected {} columns, found {}", NUM_LABELS + 1, rec.len()),
            ));
        }
        let prob = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| Error::parse(line, format!("invalid probability `{f}`")))
            })
            .collect::<Result<Vec<f32>>>()?;
        out.push(WeakLabeledSample::from_probs(&rec[0], prob, cutoff)?);
    }
    Ok(out)
}

/// Reads `sample_id,annotator_id,labels` with a header row. The label field
/// may separate indices with spaces, semicolons or (quoted) commas.
pub fn read_votes_csv(reader: impl Read) -> Result<HashMap<usize, Vec<AnnotatorVote>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let mut out: HashMap<usize, Vec<AnnotatorVote>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::parse(line, "expected `sample_id,annotator_id,labels`"));
        }
        let sample: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, "invalid sample id"))?;
        let annotator_id: u32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, "invalid annotator id"))?;
        let mut labels = BTreeSet::new();
        for tok in rec[2].split([' ', ';', ',']).filter(|t| !t.is_empty()) {
            let j: usize = tok
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid label index `{tok}`")))?;
            if j >= NUM_LABELS {
                return Err(Error::parse(line, "label index out of range"));
            }
            labels.insert(j);
        }
        out.entry(sample).or_default().push(AnnotatorVote {
            annotator_id,
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SEQ_LEN;
    use proptest::prelude::*;

    fn probs(entries: &[(usize, f32)]) -> Vec<f32> {
        let mut p = vec![0.0; NUM_LABELS];
        for &(j, v) in entries {
            p[j] = v;
        }
        p
    }

    fn weak(entries: &[(usize, f32)], proposed: &[usize]) -> WeakLabeledSample {
        WeakLabeledSample {
            text: "t".into(),
            prob: probs(entries),
            proposed: proposed.iter().copied().collect(),
        }
    }

    fn vote(id: u32, labels: &[usize]) -> AnnotatorVote {
        AnnotatorVote {
            annotator_id: id,
            labels: labels.iter().copied().collect(),
        }
    }

    fn dataset(rows: &[&[u8]], split: Split) -> EncodedDataset {
        let l = rows[0].len();
        let flat: Vec<u8> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EncodedDataset::new(
            Array2::from_shape_fn((rows.len(), SEQ_LEN), |(i, _)| i as u32),
            Array2::from_shape_vec((rows.len(), l), flat).unwrap(),
            split,
        )
        .unwrap()
    }

    #[test]
    fn weak_labels_threshold_inclusive() {
        assert_eq!(weak_labels_from_probs(&probs(&[(5, 0.9)]), 0.5).unwrap(), [5].into());
        assert!(weak_labels_from_probs(&probs(&[]), 0.5).unwrap().is_empty());
        assert_eq!(
            weak_labels_from_probs(&probs(&[(2, 0.5), (3, 0.49)]), 0.5).unwrap(),
            [2].into()
        );
        assert!(weak_labels_from_probs(&[0.1; 3], 0.5).is_err());
    }

    #[test]
    fn alignment_uses_minimum_strictly() {
        let g = |s: &WeakLabeledSample| alignment_gate(s, 0.7).unwrap();
        assert_eq!(g(&weak(&[(18, 0.9), (17, 0.65)], &[18, 17])), GateDecision::Reject);
        assert_eq!(g(&weak(&[(18, 0.71)], &[18])), GateDecision::Accept);
        assert_eq!(g(&weak(&[(18, 0.70)], &[18])), GateDecision::Reject);
        assert!(alignment_gate(&weak(&[], &[]), 0.7).is_err());
    }

    #[test]
    fn majority_needs_strictly_more_than_half() {
        let five = [vote(0, &[3, 7]), vote(1, &[3, 7]), vote(2, &[3]), vote(3, &[]), vote(4, &[1])];
        let out = majority_vote(&five);
        assert!(out.contains(&3));
        assert!(!out.contains(&7));
        let four = [vote(0, &[1]), vote(1, &[1]), vote(2, &[]), vote(3, &[])];
        assert!(majority_vote(&four).is_empty());
    }

    #[test]
    fn gate_pipeline_applies_votes() {
        let samples = vec![
            weak(&[(1, 0.9)], &[1]),
            weak(&[(2, 0.6)], &[2]),
            weak(&[], &[]),
            weak(&[(4, 0.95)], &[4]),
        ];
        let mut votes = HashMap::new();
        votes.insert(3, vec![vote(0, &[5]), vote(1, &[5]), vote(2, &[4])]);
        let (acc, stats) = gate_weak_samples(&samples, &votes, 0.7).unwrap();
        assert_eq!(acc.len(), 2);
        assert_eq!(acc[0].labels, [1].into());
        assert_eq!(acc[1].labels, [5].into());
        assert_eq!((stats.misaligned, stats.no_proposal, stats.accepted), (1, 1, 2));
    }

    #[test]
    fn single_label_balance_trace() {
        // A A A B
        let ds = dataset(&[&[1, 0], &[1, 0], &[1, 0], &[0, 1]], Split::Train);
        let cfg = BalanceConfig {
            target: Some(3),
            ..Default::default()
        };
        let out = oversample_balance(&ds, &cfg).unwrap();
        assert_eq!(label_counts(&out.labels), vec![3, 3]);
        assert_eq!(out.len(), 6);
        // originals retained in order, duplicates are copies of the B row
        assert_eq!(out.sequences.column(0).to_vec(), vec![0, 1, 2, 3, 3, 3]);
    }

    #[test]
    fn balanced_input_is_fixed_point() {
        let ds = dataset(&[&[1, 0], &[0, 1]], Split::Train);
        let out = oversample_balance(&ds, &BalanceConfig::default()).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn multi_label_duplicate_counts_toward_both() {
        // counts: l0=3, l1=1, l2=1. Target 3 (max). The only row with l1 also
        // carries l2, so duplicating it twice fixes both deficits.
        let ds = dataset(&[&[1, 0, 0], &[1, 0, 0], &[1, 1, 1]], Split::Train);
        let out = oversample_balance(&ds, &BalanceConfig::default()).unwrap();
        assert_eq!(label_counts(&out.labels), vec![5, 3, 3]);
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn duplication_cap_limits_copies() {
        let ds = dataset(&[&[1, 0], &[1, 0], &[1, 0], &[1, 0], &[0, 1]], Split::Train);
        let cfg = BalanceConfig {
            max_duplication_factor: 2,
            ..Default::default()
        };
        let out = oversample_balance(&ds, &cfg).unwrap();
        assert_eq!(label_counts(&out.labels), vec![4, 2]);
    }

    #[test]
    fn refuses_non_training_splits() {
        let ds = dataset(&[&[1, 0]], Split::Val);
        let err = oversample_balance(&ds, &BalanceConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "balancing restricted to training split");
    }

    #[test]
    fn hash_annotator_is_deterministic() {
        let a = HashAnnotator::default();
        let p = a.annotate("hello");
        assert_eq!(p.len(), NUM_LABELS);
        assert_eq!(p, a.annotate("hello"));
        assert_ne!(p, a.annotate("hello!"));
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reads_weak_and_vote_files() {
        let mut csv = String::from("text");
        for j in 0..NUM_LABELS {
            csv.push_str(&format!(",p{j}"));
        }
        csv.push_str("\n\"hi, there\"");
        for j in 0..NUM_LABELS {
            csv.push_str(if j == 4 { ",0.8" } else { ",0.1" });
        }
        csv.push('\n');
        let w = read_weak_csv(csv.as_bytes(), 0.5).unwrap();
        assert_eq!(w[0].text, "hi, there");
        assert_eq!(w[0].proposed, [4].into());

        let votes = read_votes_csv("sample_id,annotator_id,labels\n0,1,\"3,4\"\n0,2,4;5\n".as_bytes()).unwrap();
        assert_eq!(votes[&0].len(), 2);
        assert_eq!(votes[&0][1].labels, [4, 5].into());
    }

    fn skewed(counts: &[usize], multi: bool) -> EncodedDataset {
        let l = counts.len();
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for (j, &c) in counts.iter().enumerate() {
            for k in 0..c {
                let mut r = vec![0u8; l];
                r[j] = 1;
                if multi && k % 3 == 0 {
                    r[(j + 1) % l] = 1;
                }
                rows.push(r);
            }
        }
        let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
        dataset(&refs, Split::Train)
    }

    proptest! {
        #[test]
        fn balance_invariants(counts in proptest::collection::vec(1usize..30, 2..6),
                              cap in 1usize..6, seed in any::<u64>(), multi in any::<bool>()) {
            let ds = skewed(&counts, multi);
            let before = label_counts(&ds.labels);
            let target = *before.iter().max().unwrap();
            let cfg = BalanceConfig { target: None, seed, max_duplication_factor: cap };
            let out = oversample_balance(&ds, &cfg).unwrap();
            let after = label_counts(&out.labels);
            for j in 0..counts.len() {
                let rows_with = (0..ds.len()).filter(|&i| ds.labels[[i, j]] == 1).count();
                prop_assert!(after[j] >= before[j]);
                prop_assert!(after[j] >= target.min(rows_with * cap));
            }
            prop_assert_eq!(oversample_balance(&ds, &cfg).unwrap(), out);
        }

        #[test]
        fn single_label_counts_do_not_depend_on_seed(counts in proptest::collection::vec(1usize..30, 2..6),
                                                     s1 in any::<u64>(), s2 in any::<u64>()) {
            let ds = skewed(&counts, false);
            let a = oversample_balance(&ds, &BalanceConfig { seed: s1, ..Default::default() }).unwrap();
            let b = oversample_balance(&ds, &BalanceConfig { seed: s2, ..Default::default() }).unwrap();
            prop_assert_eq!(label_counts(&a.labels), label_counts(&b.labels));
        }

        #[test]
        fn accepted_implies_all_above(p in proptest::collection::vec(0.0f32..1.0, NUM_LABELS),
                                      cutoff in 0.05f32..0.95) {
            let w = WeakLabeledSample::from_probs("x", p.clone(), cutoff).unwrap();
            if !w.proposed.is_empty() && alignment_gate(&w, 0.7).unwrap() == GateDecision::Accept {
                prop_assert!(w.proposed.iter().all(|&j| p[j] > 0.7));
            }
        }

        #[test]
        fn majority_subset_of_union(sets in proptest::collection::vec(
                proptest::collection::btree_set(0usize..NUM_LABELS, 0..5), 1..7)) {
            let votes: Vec<AnnotatorVote> = sets.iter().enumerate()
                .map(|(i, s)| AnnotatorVote { annotator_id: i as u32, labels: s.clone() }).collect();
            let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
            prop_assert!(majority_vote(&votes).is_subset(&union));
        }
    }
}
