//! Multi-label metrics, per-label ROC AUC, threshold tuning and reports.
//!
//! Means of ratios are accumulated as exact rationals and rounded once, so
//! results agree bit-for-bit with any other correctly rounded computation.

mod auc;
mod io;
mod metrics;
mod report;
mod thresholds;

use ndarray::{Array2, ArrayView2};

use crate::corpus::Split;
use crate::error::{Error, Result};

pub use auc::{auc, macro_auc, AucSummary};
pub use io::{
    read_predictions_csv, read_thresholds_csv, write_predictions_csv, write_thresholds_csv,
};
pub use metrics::{
    evaluate, hamming_loss, jaccard_index, label_counts, macro_prf, micro_prf, subset_accuracy,
    AggregateMetrics, LabelCounts, LabelRow, MetricsReport, Prf,
};
pub use report::{rank_sentence_labels, render_f1_svg, SentenceRanking};
pub use thresholds::{default_grid, f1_fraction, tune_thresholds};

/// Predicted probabilities, one row per sample and one column per label.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub probs: Array2<f32>,
    pub split: Option<Split>,
}

impl PredictionMatrix {
    pub fn new(probs: Array2<f32>, split: Option<Split>) -> Result<Self> {
        if let Some((i, v)) = probs.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!(
                "probability {v} at row {} is outside [0, 1]",
                i / probs.ncols().max(1)
            )));
        }
        Ok(PredictionMatrix { probs, split })
    }

    pub fn nrows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.probs.ncols()
    }
}

/// One decision threshold per label, each in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    tau: Vec<f64>,
}

impl ThresholdVector {
    pub fn new(tau: Vec<f64>) -> Result<Self> {
        if let Some((j, t)) = tau.iter().enumerate().find(|(_, t)| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Data(format!("threshold {t} for label {j} is outside (0, 1)")));
        }
        Ok(ThresholdVector { tau })
    }

    pub fn uniform(value: f64, num_labels: usize) -> Result<Self> {
        Self::new(vec![value; num_labels])
    }

    pub fn values(&self) -> &[f64] {
        &self.tau
    }

    pub fn get(&self, label: usize) -> f64 {
        self.tau[label]
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// `1` where `p >= tau` for the label's column.
pub fn binarize(probs: ArrayView2<f32>, tau: &ThresholdVector) -> Result<Array2<u8>> {
    if probs.ncols() != tau.len() {
        return Err(Error::Shape(format!(
            "{} probability columns but {} thresholds",
            probs.ncols(),
            tau.len()
        )));
    }
    let mut out = Array2::zeros(probs.raw_dim());
    for ((i, j), &p) in probs.indexed_iter() {
        out[(i, j)] = u8::from(p as f64 >= tau.get(j));
    }
    Ok(out)
}

fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("predictions {a:?} and labels {b:?} differ")));
    }
    if a.0 == 0 {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn binarize_is_inclusive() {
        let p = array![[0.5f32, 0.49], [0.7, 0.2]];
        let t = ThresholdVector::new(vec![0.5, 0.2]).unwrap();
        assert_eq!(binarize(p.view(), &t).unwrap(), array![[1u8, 1], [1, 1]]);
        let t = ThresholdVector::uniform(0.6, 2).unwrap();
        assert_eq!(binarize(p.view(), &t).unwrap(), array![[0u8, 0], [1, 0]]);
    }

    #[test]
    fn threshold_range_checked() {
        assert!(ThresholdVector::new(vec![0.0]).is_err());
        assert!(ThresholdVector::new(vec![1.0]).is_err());
        assert!(ThresholdVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn probabilities_range_checked() {
        assert!(PredictionMatrix::new(array![[0.5f32, 1.5]], None).is_err());
        assert!(PredictionMatrix::new(array![[f32::NAN]], None).is_err());
    }
}
