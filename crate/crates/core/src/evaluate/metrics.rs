use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use ndarray::ArrayView2;

use super::auc::{macro_auc, AucSummary};
use super::{binarize, check_same_shape, PredictionMatrix, ThresholdVector};
use crate::corpus::LabelVocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMetrics {
    pub subset_accuracy: f64,
    pub jaccard: f64,
    pub hamming_loss: f64,
    pub micro: Prf,
    pub macro_: Prf,
    pub auc: AucSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub label: String,
    pub threshold: f64,
    pub support: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub aggregate: AggregateMetrics,
    pub per_label: Vec<LabelRow>,
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// `num / den` rounded once; `0` when the denominator is zero.
fn safe_div(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        to_f64(&ratio(num, den))
    }
}

/// Fraction of rows whose predicted label set equals the true one.
pub fn subset_accuracy(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<f64> {
    check_same_shape(pred.dim(), truth.dim())?;
    let hits = pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .filter(|(p, t)| p.iter().zip(t.iter()).all(|(a, b)| (*a != 0) == (*b != 0)))
        .count();
    Ok(safe_div(hits as u64, pred.nrows() as u64))
}

/// Mean per-row |P ∩ T| / |P ∪ T|; a row where both sets are empty scores 1.
pub fn jaccard_index(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<f64> {
    check_same_shape(pred.dim(), truth.dim())?;
    // Row denominators are at most L, so group numerators by denominator.
    let mut by_den = vec![0u64; pred.ncols() + 1];
    let mut both_empty = 0u64;
    for (p, t) in pred.rows().into_iter().zip(truth.rows()) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in p.iter().zip(t.iter()) {
            let (a, b) = (*a != 0, *b != 0);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            both_empty += 1;
        } else {
            by_den[union] += inter as u64;
        }
    }
    let mut total = BigRational::from_integer(BigInt::from(both_empty));
    for (den, &num) in by_den.iter().enumerate().skip(1) {
        if num > 0 {
            total += ratio(num, den as u64);
        }
    }
    Ok(to_f64(&(total / BigInt::from(pred.nrows()))))
}

/// Fraction of misclassified (row, label) cells.
pub fn hamming_loss(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<f64> {
    check_same_shape(pred.dim(), truth.dim())?;
    let wrong = pred.iter().zip(truth.iter()).filter(|(a, b)| (**a != 0) != (**b != 0)).count();
    Ok(safe_div(wrong as u64, pred.len() as u64))
}

pub fn label_counts(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<Vec<LabelCounts>> {
    check_same_shape(pred.dim(), truth.dim())?;
    let mut counts = vec![LabelCounts::default(); pred.ncols()];
    for ((_, j), (&p, &t)) in pred.indexed_iter().zip(truth.iter()).map(|((ij, p), t)| (ij, (p, t))) {
        let c = &mut counts[j];
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(counts)
}

fn prf_of(c: &LabelCounts) -> Prf {
    Prf {
        precision: safe_div(c.tp, c.tp + c.fp),
        recall: safe_div(c.tp, c.tp + c.fn_),
        f1: safe_div(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Precision, recall and F1 over counts pooled across labels.
pub fn micro_prf(counts: &[LabelCounts]) -> Prf {
    let pooled = counts.iter().fold(LabelCounts::default(), |a, c| LabelCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
        tn: a.tn + c.tn,
    });
    prf_of(&pooled)
}

/// Unweighted mean over labels of per-label precision, recall and F1.
pub fn macro_prf(counts: &[LabelCounts]) -> Prf {
    if counts.is_empty() {
        return Prf::default();
    }
    let mean = |f: &dyn Fn(&LabelCounts) -> (u64, u64)| {
        let mut sum = BigRational::zero();
        for c in counts {
            let (n, d) = f(c);
            if d > 0 {
                sum += ratio(n, d);
            }
        }
        to_f64(&(sum / BigInt::from(counts.len())))
    };
    Prf {
        precision: mean(&|c| (c.tp, c.tp + c.fp)),
        recall: mean(&|c| (c.tp, c.tp + c.fn_)),
        f1: mean(&|c| (2 * c.tp, 2 * c.tp + c.fp + c.fn_)),
    }
}

/// Every aggregate and per-label metric for one prediction set.
pub fn evaluate(
    preds: &PredictionMatrix,
    truth: ArrayView2<u8>,
    tau: &ThresholdVector,
    vocab: &LabelVocabulary,
) -> Result<MetricsReport> {
    check_same_shape(preds.probs.dim(), truth.dim())?;
    if vocab.len() != truth.ncols() {
        return Err(Error::Shape(format!(
            "{} label names for {} label columns",
            vocab.len(),
            truth.ncols()
        )));
    }
    let pred = binarize(preds.probs.view(), tau)?;
    let counts = label_counts(pred.view(), truth)?;
    let auc = macro_auc(preds.probs.view(), truth)?;
    let n = truth.nrows() as u64;
    let per_label = counts
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let prf = prf_of(c);
            LabelRow {
                label: vocab.name(j).to_string(),
                threshold: tau.get(j),
                support: c.tp + c.fn_,
                accuracy: safe_div(c.tp + c.tn, n),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                auc: auc.per_label[j],
            }
        })
        .collect();
    Ok(MetricsReport {
        aggregate: AggregateMetrics {
            subset_accuracy: subset_accuracy(pred.view(), truth)?,
            jaccard: jaccard_index(pred.view(), truth)?,
            hamming_loss: hamming_loss(pred.view(), truth)?,
            micro: micro_prf(&counts),
            macro_: macro_prf(&counts),
            auc,
        },
        per_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        // Row 1: P={0}, T={0,1}; row 2: P={2}, T={2}; row 3: both empty.
        let p = array![[1u8, 0, 0], [0, 0, 1], [0, 0, 0]];
        let t = array![[1u8, 1, 0], [0, 0, 1], [0, 0, 0]];
        assert_eq!(subset_accuracy(p.view(), t.view()).unwrap(), 2.0 / 3.0);
        assert_eq!(jaccard_index(p.view(), t.view()).unwrap(), 2.5 / 3.0);
        assert_eq!(hamming_loss(p.view(), t.view()).unwrap(), 1.0 / 9.0);
        let c = label_counts(p.view(), t.view()).unwrap();
        let micro = micro_prf(&c);
        assert_eq!(micro.precision, 1.0);
        assert_eq!(micro.recall, 2.0 / 3.0);
        assert_eq!(micro.f1, 0.8);
        let mac = macro_prf(&c);
        // label 1 has tp = fp = 0: precision 0, recall 0, f1 0
        assert_eq!(mac.precision, 2.0 / 3.0);
        assert_eq!(mac.f1, 2.0 / 3.0);
    }

    fn matrix(rows: usize, cols: usize, bits: &[bool]) -> Array2<u8> {
        Array2::from_shape_fn((rows, cols), |(i, j)| u8::from(bits[i * cols + j]))
    }

    proptest! {
        #[test]
        fn bounded_and_perfect(rows in 1usize..12, cols in 1usize..6, seed in proptest::collection::vec(any::<bool>(), 144)) {
            let p = matrix(rows, cols, &seed);
            let t = matrix(rows, cols, &seed[72..]);
            for v in [subset_accuracy(p.view(), t.view()).unwrap(), jaccard_index(p.view(), t.view()).unwrap(), hamming_loss(p.view(), t.view()).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(subset_accuracy(t.view(), t.view()).unwrap(), 1.0);
            prop_assert_eq!(jaccard_index(t.view(), t.view()).unwrap(), 1.0);
            prop_assert_eq!(hamming_loss(t.view(), t.view()).unwrap(), 0.0);
            let c = label_counts(p.view(), t.view()).unwrap();
            let m = micro_prf(&c);
            prop_assert!((0.0..=1.0).contains(&m.f1));
            let cells: u64 = c.iter().map(|c| c.tp + c.fp + c.fn_ + c.tn).sum();
            prop_assert_eq!(cells, (rows * cols) as u64);
        }
    }
}
