//! Accuracy, per-class breakdown and confusion matrix, plus the text report
//! that sets a measured run next to published reference rates.

use std::fmt::Write as _;

use crate::dataset::{class_name, Dataset};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::training::predict_dataset;

/// Published correct-classification rates (percent) on the 12,630-image test
/// set. These are reference values only; nothing here recomputes them.
pub const REFERENCE_RATES: [(f64, &str); 5] = [
    (97.62, "using Capsule networks"),
    (96.14, "Random Forests"),
    (95.68, "LDA(HOG 2)"),
    (93.18, "LDA(HOG 1)"),
    (92.34, "LDA(HOG 3)"),
];

/// Method label of the measured row.
pub const MEASURED_METHOD: &str = "using Capsule networks";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ccr_percent: f64,
    pub misclassifications: usize,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= num_classes || l >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class index {} outside {num_classes} classes",
                    p.max(l)
                )));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let total = labels.len();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        let accuracy = correct as f64 / total as f64;
        Ok(EvalReport {
            total,
            correct,
            accuracy,
            ccr_percent: 100.0 * accuracy,
            misclassifications: total - correct,
            per_class,
            confusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// Samples of class `k` in the evaluated set.
    pub fn class_count(&self, k: usize) -> usize {
        self.confusion[k].iter().sum()
    }

    /// Rate table: the measured capsule-network row first, then the published
    /// reference rows; afterwards the summary counts and per-class accuracies.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "COMPARISON OF CORRECT CLASSIFICATION RATE");
        let _ = writeln!(out, "CCR (%) | Method");
        let _ = writeln!(out, "{}", table_row(self.ccr_percent, MEASURED_METHOD));
        for (rate, method) in REFERENCE_RATES {
            let _ = writeln!(out, "{} [reference]", table_row(rate, method));
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "images: {}", self.total);
        let _ = writeln!(out, "correct: {}", self.correct);
        let _ = writeln!(out, "misclassifications: {}", self.misclassifications);
        let _ = writeln!(out, "accuracy: {}", self.accuracy);
        let _ = writeln!(out);
        let _ = writeln!(out, "class | name | samples | accuracy");
        for (k, acc) in self.per_class.iter().enumerate() {
            let name = class_name(k);
            let acc = acc.map_or_else(|| "absent".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(out, "{k} | {name} | {} | {acc}", self.class_count(k));
        }
        out
    }

    /// Header `true\predicted,0,1,...` then one row per true class.
    pub fn confusion_csv(&self) -> String {
        let j = self.num_classes();
        let mut out = String::from("true\\predicted");
        for k in 0..j {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
        for (k, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{k}");
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Formats a rate the way the reference table does: two decimals.
pub fn format_rate(rate: f64) -> String {
    format!("{rate:.2}")
}

/// Table row for a rate and method label, e.g. `97.62 | using Capsule networks`.
pub fn table_row(rate: f64, method: &str) -> String {
    format!("{} | {method}", format_rate(rate))
}

/// Inference-mode evaluation over a whole dataset.
pub fn evaluate(network: &Network, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let c = network.config();
    if data.channels() != c.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, model expects {}",
            data.channels(),
            c.channels
        )));
    }
    let predictions = predict_dataset(network, data, batch_size)?;
    let labels: Vec<usize> = data.labels().iter().map(|&l| l as usize).collect();
    EvalReport::from_predictions(&predictions, &labels, c.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct_and_all_wrong() {
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let r = EvalReport::from_predictions(&labels, &labels, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.misclassifications, 0);
        let wrong: Vec<usize> = labels.iter().map(|l| (l + 1) % 3).collect();
        let r = EvalReport::from_predictions(&wrong, &labels, 3).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.misclassifications, 10);
    }

    #[test]
    fn absent_classes_are_marked() {
        let r = EvalReport::from_predictions(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), None, None]);
        assert!(r.render_text().contains(&format!("2 | {} | 0 | absent", class_name(2))));
    }

    #[test]
    fn reference_row_format() {
        assert_eq!(table_row(97.62, "using Capsule networks"), "97.62 | using Capsule networks");
        let mut preds = vec![0usize; 10000];
        preds[..238].iter_mut().for_each(|p| *p = 1);
        let r = EvalReport::from_predictions(&preds, &vec![0; 10000], 2).unwrap();
        assert_eq!(format_rate(r.ccr_percent), "97.62");
        let text = r.render_text();
        assert_eq!(text.lines().filter(|l| *l == "97.62 | using Capsule networks").count(), 1);
        assert!(text.contains("96.14 | Random Forests [reference]"));
    }

    #[test]
    fn confusion_csv_shape() {
        let r = EvalReport::from_predictions(&[0, 1, 2], &[0, 2, 2], 43).unwrap();
        let csv = r.confusion_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 44);
        assert!(lines.iter().all(|l| l.split(',').count() == 44));
        assert_eq!(lines[3].split(',').nth(2), Some("1"));
    }

    #[test]
    fn empty_rejected() {
        assert!(EvalReport::from_predictions(&[], &[], 3).is_err());
    }
}
