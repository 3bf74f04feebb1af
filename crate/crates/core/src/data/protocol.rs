//! Long-tail subsampling: the class at rank `j` (of `N_c`, most populous
//! first) keeps `round(N_max * p^(j / (N_c - 1)))` samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// How classes are ranked before the geometric decay is applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "classes")]
pub enum ClassOrder {
    /// Descending original count; ties go to the lower class id.
    #[default]
    ByCountDesc,
    /// Explicit ranking: `classes[j]` is the class placed at rank `j`.
    GivenPermutation(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub p: f64,
    pub seed: u64,
    #[serde(default)]
    pub order: ClassOrder,
}

impl ImbalanceSpec {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            seed,
            order: ClassOrder::ByCountDesc,
        }
    }

    pub fn with_order(mut self, order: ClassOrder) -> Self {
        self.order = order;
        self
    }
}

/// Target count for rank `rank` before clamping to the available samples.
/// Rounds half up and never returns less than one.
pub fn kept_count(n_max: usize, rank: usize, num_classes: usize, p: f64) -> usize {
    let exponent = rank as f64 / (num_classes - 1) as f64;
    let raw = n_max as f64 * p.powf(exponent);
    ((raw + 0.5).floor() as usize).max(1)
}

/// Kept counts for ranks `0..num_classes`.
pub fn protocol_counts(n_max: usize, num_classes: usize, p: f64) -> Result<Vec<usize>> {
    validate(num_classes, p)?;
    Ok((0..num_classes)
        .map(|j| kept_count(n_max, j, num_classes, p))
        .collect())
}

fn validate(num_classes: usize, p: f64) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::ProtocolUndefined { num_classes });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "imbalance ratio p must lie in (0, 1], got {p}"
        )));
    }
    Ok(())
}

fn ranking(counts: &[usize], order: &ClassOrder) -> Result<Vec<usize>> {
    match order {
        ClassOrder::ByCountDesc => {
            let mut classes: Vec<usize> = (0..counts.len()).collect();
            // stable sort keeps ascending ids among ties
            classes.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
            Ok(classes)
        }
        ClassOrder::GivenPermutation(perm) => {
            let mut seen = vec![false; counts.len()];
            if perm.len() != counts.len() {
                return Err(Error::InvalidSpec(format!(
                    "permutation has {} entries for {} classes",
                    perm.len(),
                    counts.len()
                )));
            }
            for &c in perm {
                if c >= counts.len() || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::InvalidSpec(format!(
                        "class order {perm:?} is not a permutation of 0..{}",
                        counts.len()
                    )));
                }
            }
            Ok(perm.clone())
        }
    }
}

/// Returns a long-tailed subsample of `ds`. Rows within a class are drawn
/// uniformly without replacement; the output keeps the original row order.
pub fn apply_sampling_protocol(ds: &LabeledDataset, spec: &ImbalanceSpec) -> Result<LabeledDataset> {
    let k = ds.num_classes();
    validate(k, spec.p)?;

    let labels = ds.labels_unguarded();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let n_max = counts.iter().copied().max().unwrap_or(0);
    let order = ranking(&counts, &spec.order)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::with_capacity(ds.len());
    for (rank, &class) in order.iter().enumerate() {
        let target = kept_count(n_max, rank, k, spec.p).min(counts[class]);
        let mut rows = by_class[class].clone();
        rows.shuffle(&mut rng);
        keep.extend_from_slice(&rows[..target]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}
