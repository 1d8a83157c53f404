use std::cmp::Ordering;

use ndarray::ArrayView2;

use super::{check_same_shape, ThresholdVector};
use crate::error::{Error, Result};

/// `k / 20` for `k = 1..=19`.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// F1 as an unreduced fraction `(2TP, 2TP + FP + FN)`; `(0, 1)` when empty.
pub fn f1_fraction(tp: u64, fp: u64, fn_: u64) -> (u64, u64) {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        (0, 1)
    } else {
        (2 * tp, den)
    }
}

fn cmp_fraction(a: (u64, u64), b: (u64, u64)) -> Ordering {
    (a.0 as u128 * b.1 as u128).cmp(&(b.0 as u128 * a.1 as u128))
}

/// Per label, the smallest grid value maximizing validation F1 with
/// prediction rule `p >= tau`.
pub fn tune_thresholds(probs: ArrayView2<f32>, truth: ArrayView2<u8>, grid: &[f64]) -> Result<ThresholdVector> {
    check_same_shape(probs.dim(), truth.dim())?;
    let mut grid: Vec<f64> = grid.to_vec();
    if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
        return Err(Error::Config("threshold grid values must lie in (0, 1)".into()));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut tau = Vec::with_capacity(probs.ncols());
    for j in 0..probs.ncols() {
        let col = probs.column(j);
        let t = truth.column(j);
        let mut best: Option<(f64, (u64, u64))> = None;
        for &g in &grid {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &y) in col.iter().zip(t.iter()) {
                match (p as f64 >= g, y != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let f1 = f1_fraction(tp, fp, fn_);
            if best.is_none_or(|(_, b)| cmp_fraction(f1, b) == Ordering::Greater) {
                best = Some((g, f1));
            }
        }
        tau.push(best.expect("nonempty grid").0);
    }
    ThresholdVector::new(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn grid_is_nineteen_steps() {
        let g = default_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[18], 0.95);
    }

    #[test]
    fn picks_smallest_maximizer() {
        // Positives at 0.6 and 0.7, negative at 0.2: any tau in (0.2, 0.6] is perfect.
        let p = array![[0.6f32], [0.7], [0.2]];
        let y = array![[1u8], [1], [0]];
        let t = tune_thresholds(p.view(), y.view(), &default_grid()).unwrap();
        assert_eq!(t.values(), &[0.25]);
    }

    #[test]
    fn all_zero_f1_keeps_first_grid_value() {
        let p = array![[0.1f32], [0.2]];
        let y = array![[0u8], [0]];
        let t = tune_thresholds(p.view(), y.view(), &default_grid()).unwrap();
        assert_eq!(t.values(), &[0.05]);
    }

    #[test]
    fn fraction_order_is_exact() {
        assert_eq!(cmp_fraction((2, 3), (4, 6)), Ordering::Equal);
        assert_eq!(cmp_fraction((1, 3), (1, 2)), Ordering::Less);
        assert_eq!(f1_fraction(0, 0, 0), (0, 1));
    }
}
