use std::fmt::Write;

use super::metrics::LabelRow;
use super::ThresholdVector;
use crate::corpus::LabelVocabulary;
use crate::error::{Error, Result};

/// Labels of one sentence ordered by probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRanking {
    pub labels: Vec<(String, f32)>,
    /// Nothing reached its threshold; `labels` holds only the top label.
    pub below_threshold: bool,
}

/// Labels with `p >= tau`, highest first (ties by label index), at most `k`.
pub fn rank_sentence_labels(
    probs_row: &[f32],
    tau: &ThresholdVector,
    vocab: &LabelVocabulary,
    k: usize,
) -> Result<SentenceRanking> {
    if probs_row.len() != tau.len() || probs_row.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "{} probabilities, {} thresholds, {} labels",
            probs_row.len(),
            tau.len(),
            vocab.len()
        )));
    }
    if probs_row.is_empty() {
        return Err(Error::Data("no labels to rank".into()));
    }
    let mut order: Vec<usize> = (0..probs_row.len()).collect();
    order.sort_by(|&a, &b| probs_row[b].total_cmp(&probs_row[a]).then(a.cmp(&b)));
    let mut labels: Vec<(String, f32)> = order
        .iter()
        .filter(|&&j| probs_row[j] as f64 >= tau.get(j))
        .take(k)
        .map(|&j| (vocab.name(j).to_string(), probs_row[j]))
        .collect();
    let below_threshold = labels.is_empty();
    if below_threshold {
        labels.push((vocab.name(order[0]).to_string(), probs_row[order[0]]));
    }
    Ok(SentenceRanking { labels, below_threshold })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of per-label F1 as standalone SVG.
pub fn render_f1_svg(rows: &[LabelRow], title: &str) -> String {
    let bar_h = 16;
    let left = 120;
    let width = 400;
    let top = 30;
    let height = top + rows.len() * (bar_h + 4) + 30;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        left + width + 60
    );
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, escape(title));
    for (i, r) in rows.iter().enumerate() {
        let y = top + i * (bar_h + 4);
        let w = (r.f1.clamp(0.0, 1.0) * width as f64).round();
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6,
            y + bar_h - 4,
            escape(&r.label)
        );
        let _ = writeln!(s, r##"<rect x="{left}" y="{y}" width="{w}" height="{bar_h}" fill="#4878a8"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{:.3}</text>"#, left as f64 + w + 4.0, y + bar_h - 4, r.f1);
    }
    let axis_y = top + rows.len() * (bar_h + 4) + 4;
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#,
        left + width
    );
    for tick in 0..=4 {
        let x = left + tick * width / 4;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{:.2}</text>"#,
            axis_y + 14,
            tick as f64 / 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[(usize, f32)]) -> Vec<f32> {
        let mut p = vec![0.001f32; 28];
        for &(j, v) in vals {
            p[j] = v;
        }
        p
    }

    #[test]
    fn desire_then_love() {
        let vocab = LabelVocabulary::goemotions();
        let desire = vocab.index_of("desire").unwrap();
        let love = vocab.index_of("love").unwrap();
        let tau = ThresholdVector::uniform(0.5, 28).unwrap();
        let r = rank_sentence_labels(&row(&[(love, 0.86), (desire, 0.98)]), &tau, &vocab, 4).unwrap();
        assert_eq!(r.labels, vec![("desire".to_string(), 0.98), ("love".to_string(), 0.86)]);
        assert!(!r.below_threshold);
    }

    #[test]
    fn fallback_and_truncation() {
        let vocab = LabelVocabulary::goemotions();
        let tau = ThresholdVector::uniform(0.5, 28).unwrap();
        let r = rank_sentence_labels(&row(&[(3, 0.2)]), &tau, &vocab, 4).unwrap();
        assert!(r.below_threshold);
        assert_eq!(r.labels, vec![(vocab.name(3).to_string(), 0.2)]);

        let r = rank_sentence_labels(&row(&[(0, 0.9), (1, 0.8), (2, 0.7), (3, 0.6), (4, 0.55)]), &tau, &vocab, 4).unwrap();
        assert_eq!(r.labels.len(), 4);
        assert!(r.labels.iter().all(|(n, _)| n != vocab.name(4)));
    }

    #[test]
    fn svg_has_one_bar_per_label() {
        let rows: Vec<LabelRow> = ["a", "b<"]
            .iter()
            .map(|l| LabelRow {
                label: l.to_string(),
                threshold: 0.5,
                support: 1,
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 0.5,
                auc: None,
            })
            .collect();
        let svg = render_f1_svg(&rows, "F1");
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("b&lt;"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
