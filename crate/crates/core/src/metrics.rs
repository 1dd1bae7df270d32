//! Confusion counts, classification metrics, Dice overlap and report output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Default decision threshold on the positive-class probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Counts with `cad` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Predicted positive iff `probability >= threshold`.
pub fn confusion(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMatrix> {
    if probabilities.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if let Some(i) = probabilities.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(format!("prediction {} at index {i} is not a probability", probabilities[i])));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalUnit {
    Slice,
    Subject,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unit: EvalUnit,
    pub threshold: f64,
    pub counts: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No predicted positives; precision reported as 0.
    pub precision_undefined: bool,
    /// No actual positives; recall reported as 0.
    pub recall_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix, unit: EvalUnit, threshold: f64) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::invalid("cannot compute metrics over zero evaluated units"));
    }
    let accuracy = (cm.tp + cm.tn) as f64 / cm.total() as f64;
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(MetricsReport {
        unit,
        threshold,
        counts: *cm,
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
    })
}

/// Two decimal places, the table formatting used for every reported figure.
pub fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

impl MetricsReport {
    pub fn percentages(&self) -> [f64; 4] {
        let t = self.counts.total() as f64;
        let c = &self.counts;
        [c.tp, c.fp, c.fn_, c.tn].map(|v| 100.0 * v as f64 / t)
    }

    /// Key-sorted JSON document with 2-dp strings and full-precision numbers.
    pub fn to_json(&self) -> Value {
        let c = &self.counts;
        let pct = self.percentages();
        let mut counts = Map::new();
        for (k, (n, p)) in ["tp", "fp", "fn", "tn"].iter().zip([c.tp, c.fp, c.fn_, c.tn].iter().zip(pct)) {
            counts.insert(k.to_string(), json!({ "count": n, "percent": fmt2(p) }));
        }
        let metric = |v: f64| json!({ "display": fmt2(v), "value": v });
        json!({
            "accuracy": metric(self.accuracy),
            "accuracy_percent": fmt2(100.0 * self.accuracy),
            "counts": counts,
            "f1": metric(self.f1),
            "precision": metric(self.precision),
            "precision_undefined": self.precision_undefined,
            "recall": metric(self.recall),
            "recall_undefined": self.recall_undefined,
            "threshold": self.threshold,
            "total": c.total(),
            "unit": self.unit,
        })
    }
}

/// Serializes `value` as pretty JSON with sorted keys and a trailing newline.
pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    write_json(path, &report.to_json())
}

/// One evaluated unit for the audit CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub unit_id: String,
    pub label: bool,
    pub probability: f64,
}

/// `unit_id,label,probability,predicted` rows.
pub fn write_predictions_csv(path: &Path, rows: &[Prediction], threshold: f64) -> Result<()> {
    let mut out = String::from("unit_id,label,probability,predicted\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.unit_id,
            r.label as u8,
            r.probability,
            (r.probability >= threshold) as u8
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_coefficient(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
