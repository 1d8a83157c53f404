use ndarray::ArrayView2;

use super::check_same_shape;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct AucSummary {
    /// Mean over labels whose AUC is defined; `None` if no label is.
    pub macro_auc: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
    pub per_label: Vec<Option<f64>>,
}

/// ROC AUC by the rank-sum statistic with average ranks for tied scores.
/// `None` when every sample is positive or every sample is negative.
pub fn auc(scores: &[f64], truth: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len(), "scores and truth differ in length");
    let pos = truth.iter().filter(|&&t| t != 0).count() as u128;
    let neg = truth.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps tie averages integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j) as u128;
        let group_pos = order[i..j].iter().filter(|&&k| truth[k] != 0).count() as u128;
        rank2_sum += rank2 * group_pos;
        i = j;
    }
    let num = rank2_sum - pos * (pos + 1);
    Some(num as f64 / (2 * pos * neg) as f64)
}

/// Per-label AUC and their mean over the labels where it is defined.
pub fn macro_auc(probs: ArrayView2<f32>, truth: ArrayView2<u8>) -> Result<AucSummary> {
    check_same_shape(probs.dim(), truth.dim())?;
    let per_label: Vec<Option<f64>> = (0..probs.ncols())
        .map(|j| {
            let s: Vec<f64> = probs.column(j).iter().map(|&p| p as f64).collect();
            let t: Vec<u8> = truth.column(j).to_vec();
            auc(&s, &t)
        })
        .collect();
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    Ok(AucSummary {
        macro_auc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        defined: defined.len(),
        undefined: per_label.len() - defined.len(),
        per_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], truth: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (k, &sk) in scores.iter().enumerate() {
                if truth[i] != 0 && truth[k] == 0 {
                    den += 1.0;
                    num += if si > sk { 1.0 } else if si == sk { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn known_values() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Some(0.75));
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.9], &[1, 1]), None);
        assert_eq!(auc(&[0.1, 0.9], &[0, 0]), None);
    }

    #[test]
    fn undefined_labels_excluded() {
        let p = array![[0.9f32, 0.2], [0.1, 0.3]];
        let t = array![[1u8, 0], [0, 0]];
        let s = macro_auc(p.view(), t.view()).unwrap();
        assert_eq!(s.macro_auc, Some(1.0));
        assert_eq!((s.defined, s.undefined), (1, 1));
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let truth: Vec<u8> = data.iter().map(|(_, t)| u8::from(*t)).collect();
            match auc(&scores, &truth) {
                Some(a) => prop_assert!((a - pairwise(&scores, &truth)).abs() < 1e-12),
                None => prop_assert!(truth.iter().all(|&t| t == truth[0])),
            }
        }
    }
}
