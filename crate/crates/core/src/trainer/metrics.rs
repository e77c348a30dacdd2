use serde::{Deserialize, Serialize};

use super::{predict, ModelArtifact, Samples};
use crate::error::{Error, Result};

/// Accuracy and support-weighted precision/recall/F1 with the confusion
/// matrix (rows = true class, columns = predicted class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl MetricsReport {
    /// Classes never predicted get precision 0; classes without support get
    /// recall 0 but also weight 0.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, class_names: Vec<String>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) || class_names.len() != k {
            return Err(Error::validation("confusion", "must be square with one row per class"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::validation("confusion", "no evaluated samples"));
        }
        let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let tp = confusion[c][c] as f64;
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let w = support as f64 / total as f64;
            p += w * precision;
            r += w * recall;
            f += w * f1;
        }
        Ok(MetricsReport {
            accuracy: trace as f64 / total as f64,
            weighted_precision: p,
            weighted_recall: r,
            weighted_f1: f,
            confusion,
            class_names,
        })
    }

    pub fn sample_count(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// `[accuracy, precision, recall, f1]` as two-decimal percentages.
    pub fn percent_row(&self) -> [String; 4] {
        [self.accuracy, self.weighted_precision, self.weighted_recall, self.weighted_f1].map(format_percent)
    }
}

/// Renders a fraction in [0, 1] as a percentage with two decimals, rounding
/// half up (0.95485 → "95.49").
pub fn format_percent(x: f64) -> String {
    // Snap to 1e-6 hundredths first so 0.95485 (stored as 0.954849999…) rounds up.
    let hundredths_of_percent = ((x * 10_000.0) * 1e6).round() / 1e6;
    let n = (hundredths_of_percent + 0.5).floor() as i64;
    let sign = if n < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", n.abs() / 100, n.abs() % 100)
}

/// Parses `"95.49"` (optionally with `%`) into the fraction 0.9549.
pub fn parse_percent(text: &str) -> Result<f64> {
    let t = text.trim().trim_end_matches('%');
    t.parse::<f64>()
        .map(|v| v / 100.0)
        .map_err(|_| Error::validation("percent", format!("not a percentage: `{text}`")))
}

pub fn evaluate(model: &ModelArtifact, samples: &Samples) -> Result<MetricsReport> {
    let k = model.num_classes();
    if samples.is_empty() {
        return Err(Error::validation("samples", "evaluation needs at least one sample"));
    }
    if let Some(&y) = samples.labels.iter().find(|&&y| y >= k) {
        return Err(Error::validation("labels", format!("label {y} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (p, &y) in predict(model, &samples.features)?.iter().zip(&samples.labels) {
        confusion[y][p.label] += 1;
    }
    MetricsReport::from_confusion(confusion, model.class_names.clone())
}
