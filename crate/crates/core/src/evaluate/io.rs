//! CSV forms of predictions, thresholds and reports. Readers skip lines
//! beginning with `#`.

use std::io::{Read, Write};

use ndarray::Array2;

use super::metrics::MetricsReport;
use super::{PredictionMatrix, ThresholdVector};
use crate::corpus::LabelVocabulary;
use crate::error::{Error, Result};

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Data(format!("write failed: {e}"))
}

/// `id,p0..p{L-1}`; `f32` values are printed in shortest round-trip form.
pub fn write_predictions_csv(mut w: impl Write, ids: &[String], preds: &PredictionMatrix) -> Result<()> {
    if ids.len() != preds.nrows() {
        return Err(Error::Shape(format!("{} ids for {} prediction rows", ids.len(), preds.nrows())));
    }
    let mut header = String::from("id");
    for j in 0..preds.num_labels() {
        header.push_str(&format!(",p{j}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for (id, row) in ids.iter().zip(preds.probs.rows()) {
        let mut line = id.replace([',', '\n', '\r'], " ");
        for p in row {
            line.push_str(&format!(",{p}"));
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn read_predictions_csv(r: impl Read, num_labels: usize) -> Result<(Vec<String>, PredictionMatrix)> {
    let mut rdr = reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() != num_labels + 1 || header.get(0) != Some("id") {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header id,p0..p{}", num_labels - 1),
        });
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != num_labels + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", num_labels + 1, rec.len()),
            });
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            let v: f32 = f.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid probability `{f}`"),
            })?;
            values.push(v);
        }
    }
    let probs = Array2::from_shape_vec((ids.len(), num_labels), values).expect("row arity checked");
    Ok((ids, PredictionMatrix::new(probs, None)?))
}

/// `label,tau` in label order.
pub fn write_thresholds_csv(mut w: impl Write, tau: &ThresholdVector, vocab: &LabelVocabulary) -> Result<()> {
    if tau.len() != vocab.len() {
        return Err(Error::Shape(format!("{} thresholds for {} labels", tau.len(), vocab.len())));
    }
    writeln!(w, "label,tau").map_err(io_err)?;
    for (j, t) in tau.values().iter().enumerate() {
        writeln!(w, "{},{t}", vocab.name(j)).map_err(io_err)?;
    }
    Ok(())
}

/// Rows may come in any order; every label must appear exactly once.
pub fn read_thresholds_csv(r: impl Read, vocab: &LabelVocabulary) -> Result<ThresholdVector> {
    let mut rdr = reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["label", "tau"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header label,tau".into(),
        });
    }
    let mut tau = vec![None; vocab.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let (Some(name), Some(value)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Parse { line, msg: "expected label,tau".into() });
        };
        let j = vocab.index_of(name).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown label `{name}`"),
        })?;
        let v: f64 = value.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid threshold `{value}`"),
        })?;
        if tau[j].replace(v).is_some() {
            return Err(Error::Parse { line, msg: format!("duplicate label `{name}`") });
        }
    }
    let tau: Option<Vec<f64>> = tau.into_iter().collect();
    ThresholdVector::new(tau.ok_or_else(|| Error::Data("threshold file does not cover every label".into()))?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    /// `metric,value` rows.
    pub fn write_aggregate_csv(&self, mut w: impl Write) -> Result<()> {
        let a = &self.aggregate;
        let rows: [(&str, String); 12] = [
            ("subset_accuracy", format!("{:.6}", a.subset_accuracy)),
            ("jaccard", format!("{:.6}", a.jaccard)),
            ("hamming_loss", format!("{:.6}", a.hamming_loss)),
            ("micro_precision", format!("{:.6}", a.micro.precision)),
            ("micro_recall", format!("{:.6}", a.micro.recall)),
            ("micro_f1", format!("{:.6}", a.micro.f1)),
            ("macro_precision", format!("{:.6}", a.macro_.precision)),
            ("macro_recall", format!("{:.6}", a.macro_.recall)),
            ("macro_f1", format!("{:.6}", a.macro_.f1)),
            ("macro_auc", fmt_opt(a.auc.macro_auc)),
            ("auc_defined_labels", a.auc.defined.to_string()),
            ("auc_undefined_labels", a.auc.undefined.to_string()),
        ];
        writeln!(w, "metric,value").map_err(io_err)?;
        for (k, v) in rows {
            writeln!(w, "{k},{v}").map_err(io_err)?;
        }
        Ok(())
    }

    /// One row per label: threshold, accuracy, precision, recall, F1, AUC, support.
    pub fn write_per_label_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "label,threshold,accuracy,precision,recall,f1,auc,support").map_err(io_err)?;
        for r in &self.per_label {
            writeln!(
                w,
                "{},{:.2},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.label,
                r.threshold,
                r.accuracy,
                r.precision,
                r.recall,
                r.f1,
                fmt_opt(r.auc),
                r.support
            )
            .map_err(io_err)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn predictions_round_trip_bit_exact() {
        let probs = array![[0.1f32, 1.0 / 3.0, 0.999_999_9], [0.0, 1.0, 1e-7]];
        let preds = PredictionMatrix::new(probs, None).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut buf = b"# seed 1\n".to_vec();
        write_predictions_csv(&mut buf, &ids, &preds).unwrap();
        let (ids2, back) = read_predictions_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(back.probs, preds.probs);
    }

    #[test]
    fn thresholds_round_trip() {
        let vocab = LabelVocabulary::goemotions();
        let tau = ThresholdVector::new((0..28).map(|j| 0.05 * (1 + j % 19) as f64).collect()).unwrap();
        let mut buf = Vec::new();
        write_thresholds_csv(&mut buf, &tau, &vocab).unwrap();
        assert_eq!(read_thresholds_csv(buf.as_slice(), &vocab).unwrap(), tau);
        let missing = b"label,tau\nadmiration,0.5\n";
        assert!(read_thresholds_csv(&missing[..], &vocab).is_err());
    }

    #[test]
    fn bad_prediction_field_names_line() {
        let text = b"id,p0\nx,0.5\ny,abc\n";
        let err = read_predictions_csv(&text[..], 1).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
