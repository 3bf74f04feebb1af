//! Class-wise feature alignment over all source x target pairs of a batch.
//!
//! With `a_ij = sqrt(W_i^s W_j^t)` and `d_ij = ||f_i^s - f_j^t||`, the loss
//! is the ratio of the `a`-weighted mean distance over same-label pairs to
//! that over different-label pairs. Cost is `O(B_s B_t D)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub fn pairwise_distances(src: ArrayView2<'_, f64>, tgt: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::Shape(format!(
            "source feature width {} != target feature width {}",
            src.ncols(),
            tgt.ncols()
        )));
    }
    let mut dist = Array2::zeros((src.nrows(), tgt.nrows()));
    for (i, s) in src.rows().into_iter().enumerate() {
        for (j, t) in tgt.rows().into_iter().enumerate() {
            dist[[i, j]] = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
    }
    Ok(dist)
}

#[derive(Debug, Clone)]
pub struct PairAssignment {
    /// Classifier labels of the source rows.
    pub source_labels: Vec<usize>,
    /// Corrected (nearest-centroid) labels of the target rows.
    pub target_labels: Vec<usize>,
    pub source_weights: Array1<f64>,
    pub target_weights: Array1<f64>,
    pub dist: Array2<f64>,
}

impl PairAssignment {
    pub fn new(
        src_feats: ArrayView2<'_, f64>,
        tgt_feats: ArrayView2<'_, f64>,
        source_labels: Vec<usize>,
        target_labels: Vec<usize>,
        source_weights: Array1<f64>,
        target_weights: Array1<f64>,
    ) -> Result<Self> {
        if source_labels.len() != src_feats.nrows() || source_weights.len() != src_feats.nrows() {
            return Err(Error::Shape("source labels/weights do not match source rows".into()));
        }
        if target_labels.len() != tgt_feats.nrows() || target_weights.len() != tgt_feats.nrows() {
            return Err(Error::Shape("target labels/weights do not match target rows".into()));
        }
        if source_weights.iter().chain(&target_weights).any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::InvalidInput("pair weights must be non-negative".into()));
        }
        let dist = pairwise_distances(src_feats, tgt_feats)?;
        Ok(Self {
            source_labels,
            target_labels,
            source_weights,
            target_weights,
            dist,
        })
    }

    fn same(&self, i: usize, j: usize) -> bool {
        self.source_labels[i] == self.target_labels[j]
    }

    fn pair_weight(&self, i: usize, j: usize) -> f64 {
        (self.source_weights[i] * self.target_weights[j]).sqrt()
    }

    /// Weighted sums `(sum a d, sum a)` over the same-label and
    /// different-label masks.
    fn masked_sums(&self) -> [(f64, f64); 2] {
        let mut acc = [(0.0, 0.0); 2];
        for ((i, j), &d) in self.dist.indexed_iter() {
            let a = self.pair_weight(i, j);
            if a == 0.0 {
                continue;
            }
            let slot = &mut acc[usize::from(!self.same(i, j))];
            slot.0 += a * d;
            slot.1 += a;
        }
        acc
    }
}

/// Loss value together with the intermediate means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWiseValue {
    pub d_same: f64,
    pub d_diff: f64,
    pub value: f64,
}

/// `d_same / d_diff`, or `None` (inactive) when either mask carries no
/// weight or `d_diff` is zero.
pub fn class_wise_loss(assign: &PairAssignment) -> Option<ClassWiseValue> {
    let [(same_num, same_den), (diff_num, diff_den)] = assign.masked_sums();
    if same_den <= 0.0 || diff_den <= 0.0 {
        return None;
    }
    let d_same = same_num / same_den;
    let d_diff = diff_num / diff_den;
    if d_diff <= 0.0 {
        return None;
    }
    Some(ClassWiseValue {
        d_same,
        d_diff,
        value: d_same / d_diff,
    })
}

#[derive(Debug, Clone)]
pub struct ClassWiseGrad {
    pub loss: ClassWiseValue,
    pub g_source_feats: Array2<f64>,
    pub g_target_feats: Array2<f64>,
    pub g_source_weights: Array1<f64>,
    pub g_target_weights: Array1<f64>,
}

/// Loss and its gradient with respect to both feature batches and both
/// weight vectors. Labels are treated as constants.
pub fn class_wise_loss_with_grad(
    src_feats: ArrayView2<'_, f64>,
    tgt_feats: ArrayView2<'_, f64>,
    assign: &PairAssignment,
) -> Option<ClassWiseGrad> {
    let loss = class_wise_loss(assign)?;
    let [(_, same_den), (_, diff_den)] = assign.masked_sums();
    let ClassWiseValue { d_same, d_diff, .. } = loss;

    // dL/d d_same = 1/d_diff, dL/d d_diff = -d_same/d_diff^2
    let g_same = 1.0 / d_diff;
    let g_diff = -d_same / (d_diff * d_diff);

    let (bs, bt) = assign.dist.dim();
    let mut g_sf = Array2::zeros(src_feats.raw_dim());
    let mut g_tf = Array2::zeros(tgt_feats.raw_dim());
    let mut g_sw = Array1::zeros(bs);
    let mut g_tw = Array1::zeros(bt);
    for i in 0..bs {
        for j in 0..bt {
            let a = assign.pair_weight(i, j);
            if a == 0.0 {
                continue;
            }
            let d = assign.dist[[i, j]];
            let (mean, den, outer) = if assign.same(i, j) {
                (d_same, same_den, g_same)
            } else {
                (d_diff, diff_den, g_diff)
            };
            // mean = sum a d / sum a
            let g_a = outer * (d - mean) / den;
            let g_d = outer * a / den;
            g_sw[i] += g_a * a / (2.0 * assign.source_weights[i]);
            g_tw[j] += g_a * a / (2.0 * assign.target_weights[j]);
            if d > 0.0 {
                let scale = g_d / d;
                let s = src_feats.row(i);
                let t = tgt_feats.row(j);
                for k in 0..s.len() {
                    let delta = scale * (s[k] - t[k]);
                    g_sf[[i, k]] += delta;
                    g_tf[[j, k]] -= delta;
                }
            }
        }
    }
    Some(ClassWiseGrad {
        loss,
        g_source_feats: g_sf,
        g_target_feats: g_tf,
        g_source_weights: g_sw,
        g_target_weights: g_tw,
    })
}

/// Convenience wrapper returning only the scalar.
pub fn class_wise_loss_value(
    src_feats: ArrayView2<'_, f64>,
    tgt_feats: ArrayView2<'_, f64>,
    source_labels: &[usize],
    target_labels: &[usize],
    source_weights: ArrayView1<'_, f64>,
    target_weights: ArrayView1<'_, f64>,
) -> Result<Option<f64>> {
    let assign = PairAssignment::new(
        src_feats,
        tgt_feats,
        source_labels.to_vec(),
        target_labels.to_vec(),
        source_weights.to_owned(),
        target_weights.to_owned(),
    )?;
    Ok(class_wise_loss(&assign).map(|v| v.value))
}
