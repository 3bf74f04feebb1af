//! Per-class mean accuracy and confusion matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::argmax_rows;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ReferenceMlp;

/// `confusion[i][j]` counts rows of true class `i` predicted as `j`.
pub fn confusion_matrix(true_labels: &[usize], pred_labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        for label in [t, p] {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange { label, num_classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class accuracy `n_kk / N_k` (`None` for empty classes) and the mean
/// over non-empty classes.
pub fn per_class_mean_accuracy(confusion: &[Vec<u64>], class_counts: &[u64]) -> Result<(Vec<Option<f64>>, f64)> {
    if confusion.len() != class_counts.len() {
        return Err(Error::Shape("confusion rows != class count entries".into()));
    }
    for (k, (row, &n)) in confusion.iter().zip(class_counts).enumerate() {
        if row.iter().sum::<u64>() != n {
            return Err(Error::InvalidInput(format!("row {k} of the confusion matrix does not sum to {n}")));
        }
    }
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| (class_counts[k] > 0).then(|| row[k] as f64 / class_counts[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput("every class is empty".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub mean_acc: f64,
    /// Plain accuracy, for comparison only.
    pub overall_acc: f64,
    pub class_counts: Vec<u64>,
    /// Classes absent from the evaluation split (left out of the mean).
    pub empty_classes: Vec<usize>,
    pub run_metadata: RunMetadata,
}

impl MetricsReport {
    pub fn from_predictions(true_labels: &[usize], pred_labels: &[usize], num_classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(true_labels, pred_labels, num_classes)?;
        let class_counts: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let (per_class_acc, mean_acc) = per_class_mean_accuracy(&confusion, &class_counts)?;
        let correct: u64 = (0..num_classes).map(|k| confusion[k][k]).sum();
        Ok(Self {
            empty_classes: (0..num_classes).filter(|&k| class_counts[k] == 0).collect(),
            overall_acc: correct as f64 / true_labels.len().max(1) as f64,
            confusion,
            per_class_acc,
            mean_acc,
            class_counts,
            run_metadata: RunMetadata::default(),
        })
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("true\\pred");
        for j in 0..k {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Classifier-argmax predictions on `ds`, scored against its labels.
/// This is the one place target labels are meant to be read.
pub fn evaluate(model: &ReferenceMlp, ds: &LabeledDataset) -> Result<MetricsReport> {
    let (_, logits) = model.predict(ds.features())?;
    let preds = argmax_rows(logits.view());
    MetricsReport::from_predictions(ds.labels(), &preds, ds.num_classes())
}
