//! Labeled datasets, label-shift induction and batch sampling.

mod csv_io;
mod protocol;
mod sampler;
mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use protocol::{apply_sampling_protocol, kept_count, protocol_counts, ClassOrder, ImbalanceSpec};
pub use sampler::{BatchSampler, ClassBalancedSampler, UniformSampler};
pub use synthetic::{make_synthetic_pair, MeanLayout, ShiftSpec, SyntheticBenchmark, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Feature rows with integer class labels.
///
/// Labels of a target-domain dataset sit behind an access guard: every call
/// to [`LabeledDataset::labels`] on a target dataset is counted, so tests can
/// assert that a training run never looked at them. Clones share the counter.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    domain: Domain,
    class_names: Option<Vec<String>>,
    label_reads: Arc<AtomicUsize>,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "dataset needs at least one row and one feature column, got {n}x{d}"
            )));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain,
            class_names: None,
            label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_features(&self, rows: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), rows)
    }

    /// Class labels. Reads on a target dataset are recorded.
    pub fn labels(&self) -> &[usize] {
        if self.domain == Domain::Target {
            self.label_reads.fetch_add(1, Ordering::Relaxed);
        }
        &self.labels
    }

    /// Labels for the given rows (recorded like [`LabeledDataset::labels`]).
    pub fn select_labels(&self, rows: &[usize]) -> Vec<usize> {
        let labels = self.labels();
        rows.iter().map(|&i| labels[i]).collect()
    }

    /// Number of recorded target-label reads.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Per-class sample counts (a label read for target data).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Label access for dataset preparation (protocol subsampling, CSV
    /// export). Not counted; never call from a training path.
    pub(crate) fn labels_unguarded(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `rows` as a new dataset with its own read counter.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            class_names: self.class_names.clone(),
            label_reads: Arc::new(AtomicUsize::new(0)),
        }
    }
}
