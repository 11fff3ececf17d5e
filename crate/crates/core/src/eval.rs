//! Classification metrics and the `Uid,Sentiment` prediction file.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Sentiment, Tweet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {expected} gold labels but {found} predictions")]
    LengthMismatch { expected: usize, found: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("prediction file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("prediction file line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Counts indexed `[true][predicted]` in `Sentiment` order.
pub type Confusion = [[usize; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub per_class: [ClassMetrics; 3],
    pub weighted_f1: f64,
    pub accuracy: f64,
}

fn check_lengths(y_true: &[Sentiment], y_pred: &[Sentiment]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch { expected: y_true.len(), found: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn confusion_matrix(y_true: &[Sentiment], y_pred: &[Sentiment]) -> Result<Confusion> {
    check_lengths(y_true, y_pred)?;
    let mut m = [[0usize; 3]; 3];
    for (t, p) in y_true.iter().zip(y_pred) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Builds the report from a non-empty confusion matrix.
    pub fn from_confusion(confusion: Confusion) -> Result<EvalReport> {
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(EvalError::Empty);
        }
        let per_class: [ClassMetrics; 3] = std::array::from_fn(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..3).map(|r| confusion[r][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1, support }
        });
        let weighted_f1 = per_class.iter().map(|m| m.support as f64 / total as f64 * m.f1).sum();
        let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
        Ok(EvalReport { confusion, per_class, weighted_f1, accuracy: ratio(correct, total) })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Flat `key=value` lines; floats use the shortest round-tripping form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "examples={}", self.total());
        let _ = writeln!(out, "accuracy={}", self.accuracy);
        let _ = writeln!(out, "weighted_f1={}", self.weighted_f1);
        for s in Sentiment::ALL {
            let m = &self.per_class[s.index()];
            let _ = writeln!(out, "{s}.precision={}", m.precision);
            let _ = writeln!(out, "{s}.recall={}", m.recall);
            let _ = writeln!(out, "{s}.f1={}", m.f1);
            let _ = writeln!(out, "{s}.support={}", m.support);
        }
        for t in Sentiment::ALL {
            let row: Vec<String> = self.confusion[t.index()].iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "confusion.{t}={}", row.join(" "));
        }
        out
    }
}

pub fn evaluate(y_true: &[Sentiment], y_pred: &[Sentiment]) -> Result<EvalReport> {
    EvalReport::from_confusion(confusion_matrix(y_true, y_pred)?)
}

pub fn weighted_f1(y_true: &[Sentiment], y_pred: &[Sentiment]) -> Result<f64> {
    Ok(evaluate(y_true, y_pred)?.weighted_f1)
}

/// Renders the prediction CSV: header `Uid,Sentiment`, rows in input order.
pub fn predictions_csv(tweets: &[Tweet], preds: &[Sentiment]) -> Result<String> {
    if tweets.len() != preds.len() {
        return Err(EvalError::LengthMismatch { expected: tweets.len(), found: preds.len() });
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| EvalError::Io(e.into());
    w.write_record(["Uid", "Sentiment"]).map_err(io)?;
    for (t, p) in tweets.iter().zip(preds) {
        w.write_record([t.uid.as_str(), p.as_str()]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}

pub fn write_predictions(tweets: &[Tweet], preds: &[Sentiment], path: &Path) -> Result<()> {
    std::fs::write(path, predictions_csv(tweets, preds)?)?;
    Ok(())
}

/// Parses a prediction CSV back into `(uid, label)` pairs.
pub fn parse_predictions(text: &str) -> Result<Vec<(String, Sentiment)>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 1;
        let bad = |reason: String| EvalError::MalformedCsv { line, reason };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", rec.len())));
        }
        if i == 0 {
            if &rec[0] != "Uid" || &rec[1] != "Sentiment" {
                return Err(bad("missing `Uid,Sentiment` header".into()));
            }
            continue;
        }
        let label = rec[1].parse::<Sentiment>().map_err(|_| bad(format!("unknown sentiment {:?}", &rec[1])))?;
        out.push((rec[0].to_string(), label));
    }
    if out.is_empty() && text.trim().is_empty() {
        return Err(EvalError::MalformedCsv { line: 1, reason: "empty file".into() });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, Sentiment)>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}
