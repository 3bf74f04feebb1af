//! Accumulative class centroids.
//!
//! Each domain keeps a running `P^max`-weighted mean of the features assigned
//! to every class, together with the accumulated weight. Both are reset at
//! the start of each epoch. Within an iteration the accumulated state is a
//! constant; only the current batch's features and weights carry gradients.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::data::Domain;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidStore {
    centroids: Array2<f64>,
    acc_weight: Array1<f64>,
    domain: Domain,
}

fn check_batch(feats: ArrayView2<'_, f64>, weights: ArrayView1<'_, f64>, labels: &[usize], k: usize, d: usize) -> Result<()> {
    if feats.nrows() != labels.len() || weights.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows, {} weights, {} labels",
            feats.nrows(),
            weights.len(),
            labels.len()
        )));
    }
    if feats.ncols() != d {
        return Err(Error::Shape(format!("feature width {} != centroid width {d}", feats.ncols())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, num_classes: k });
    }
    Ok(())
}

impl CentroidStore {
    pub fn new(num_classes: usize, dim: usize, domain: Domain) -> Self {
        Self {
            centroids: Array2::zeros((num_classes, dim)),
            acc_weight: Array1::zeros(num_classes),
            domain,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.acc_weight.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn acc_weight(&self) -> &Array1<f64> {
        &self.acc_weight
    }

    pub fn is_populated(&self, class: usize) -> bool {
        self.acc_weight[class] > 0.0
    }

    pub fn reset(&mut self) {
        self.centroids.fill(0.0);
        self.acc_weight.fill(0.0);
    }

    pub fn is_empty(&self) -> bool {
        self.acc_weight.iter().all(|&w| w == 0.0)
    }

    /// Folds a batch into the running means:
    /// `C_k' = (C_k P_k + sum f_i w_i) / (P_k + sum w_i)` and
    /// `P_k' = P_k + sum w_i` over rows labeled `k`. Classes with no incoming
    /// weight are left untouched.
    pub fn update(&mut self, feats: ArrayView2<'_, f64>, weights: ArrayView1<'_, f64>, labels: &[usize]) -> Result<()> {
        check_batch(feats, weights, labels, self.num_classes(), self.dim())?;
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidInput("centroid weights must be finite and non-negative".into()));
        }
        let k = self.num_classes();
        let mut mass = vec![0.0; k];
        let mut sums = Array2::<f64>::zeros((k, self.dim()));
        for ((row, &w), &l) in feats.rows().into_iter().zip(weights).zip(labels) {
            mass[l] += w;
            sums.row_mut(l).scaled_add(w, &row);
        }
        for (c, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let prev = self.acc_weight[c];
            let total = prev + m;
            let mut centroid = self.centroids.row_mut(c);
            centroid *= prev;
            centroid += &sums.row(c);
            centroid /= total;
            self.acc_weight[c] = total;
        }
        Ok(())
    }

    /// Backpropagates `g_centroids` (gradient on this store's centroids
    /// right after [`CentroidStore::update`] with the same batch) to the
    /// batch features and weights.
    pub fn update_backward(
        &self,
        feats: ArrayView2<'_, f64>,
        weights: ArrayView1<'_, f64>,
        labels: &[usize],
        g_centroids: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array1<f64>) {
        let k = self.num_classes();
        let mut mass = vec![0.0; k];
        for (&w, &l) in weights.iter().zip(labels) {
            mass[l] += w;
        }
        let mut g_feats = Array2::zeros(feats.raw_dim());
        let mut g_weights = Array1::zeros(weights.len());
        for (i, (row, &l)) in feats.rows().into_iter().zip(labels).enumerate() {
            let total = self.acc_weight[l];
            if mass[l] == 0.0 || total == 0.0 {
                continue;
            }
            let g = g_centroids.row(l);
            g_feats.row_mut(i).scaled_add(weights[i] / total, &g);
            let centroid = self.centroids.row(l);
            g_weights[i] = row
                .iter()
                .zip(centroid)
                .zip(g)
                .map(|((f, c), g)| g * (f - c))
                .sum::<f64>()
                / total;
        }
        (g_feats, g_weights)
    }

    /// Nearest populated centroid for each row (Euclidean); ties go to the
    /// lowest class id.
    pub fn nearest_centroid_labels(&self, feats: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        if feats.ncols() != self.dim() {
            return Err(Error::Shape(format!("feature width {} != centroid width {}", feats.ncols(), self.dim())));
        }
        let eligible: Vec<usize> = (0..self.num_classes()).filter(|&c| self.is_populated(c)).collect();
        if eligible.is_empty() {
            return Err(Error::CentroidsNotReady);
        }
        Ok(feats
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = (f64::INFINITY, eligible[0]);
                for &c in &eligible {
                    let d2: f64 = row
                        .iter()
                        .zip(self.centroids.row(c))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d2 < best.0 {
                        best = (d2, c);
                    }
                }
                best.1
            })
            .collect())
    }

    /// CSV dump: header `class,weight,c0,...`, one row per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,weight");
        for j in 0..self.dim() {
            let _ = write!(out, ",c{j}");
        }
        out.push('\n');
        for (c, row) in self.centroids.rows().into_iter().enumerate() {
            let _ = write!(out, "{c},{}", self.acc_weight[c]);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Classes populated in both stores.
pub fn eligible_classes(src: &CentroidStore, tgt: &CentroidStore) -> Vec<usize> {
    (0..src.num_classes().min(tgt.num_classes()))
        .filter(|&c| src.is_populated(c) && tgt.is_populated(c))
        .collect()
}

fn diff_norm(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Value and centroid gradients of the alignment loss.
#[derive(Debug, Clone)]
pub struct CentroidAlignment {
    pub value: f64,
    pub g_source: Array2<f64>,
    pub g_target: Array2<f64>,
}

/// `|E| sum_k ||C_k^s - C_k^t|| / sum_{i,j} ||C_i^s - C_j^t||` over the set
/// `E` of classes populated in both domains. `None` (inactive) when fewer
/// than two classes are eligible or the denominator vanishes.
pub fn centroid_alignment_loss(src: &CentroidStore, tgt: &CentroidStore) -> Option<f64> {
    let e = eligible_classes(src, tgt);
    if e.len() < 2 {
        return None;
    }
    let (cs, ct) = (src.centroids(), tgt.centroids());
    let numer: f64 = e.iter().map(|&k| diff_norm(cs.row(k), ct.row(k))).sum();
    let denom: f64 = e
        .iter()
        .flat_map(|&i| e.iter().map(move |&j| (i, j)))
        .map(|(i, j)| diff_norm(cs.row(i), ct.row(j)))
        .sum();
    (denom > 0.0).then(|| e.len() as f64 * numer / denom)
}

pub fn centroid_alignment_with_grad(src: &CentroidStore, tgt: &CentroidStore) -> Option<CentroidAlignment> {
    let e = eligible_classes(src, tgt);
    if e.len() < 2 {
        return None;
    }
    let (cs, ct) = (src.centroids(), tgt.centroids());
    let dim = src.dim();
    let unit = |i: usize, j: usize| -> (f64, Array1<f64>) {
        let v = &cs.row(i) - &ct.row(j);
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            (n, v / n)
        } else {
            (0.0, Array1::zeros(dim))
        }
    };

    let mut numer = 0.0;
    let mut denom = 0.0;
    let mut g_num_s = Array2::zeros(cs.raw_dim());
    let mut g_den_s = Array2::zeros(cs.raw_dim());
    let mut g_num_t = Array2::zeros(ct.raw_dim());
    let mut g_den_t = Array2::zeros(ct.raw_dim());
    for &i in &e {
        for &j in &e {
            let (n, u) = unit(i, j);
            denom += n;
            g_den_s.row_mut(i).scaled_add(1.0, &u);
            g_den_t.row_mut(j).scaled_add(-1.0, &u);
            if i == j {
                numer += n;
                g_num_s.row_mut(i).scaled_add(1.0, &u);
                g_num_t.row_mut(j).scaled_add(-1.0, &u);
            }
        }
    }
    if denom <= 0.0 {
        return None;
    }
    let m = e.len() as f64;
    let value = m * numer / denom;
    // d(m N / D) = m/D dN - m N / D^2 dD
    let a = m / denom;
    let b = m * numer / (denom * denom);
    Some(CentroidAlignment {
        value,
        g_source: g_num_s * a - g_den_s * b,
        g_target: g_num_t * a - g_den_t * b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn store_from(centroids: Array2<f64>, domain: Domain) -> CentroidStore {
        let k = centroids.nrows();
        CentroidStore {
            centroids,
            acc_weight: Array1::ones(k),
            domain,
        }
    }

    #[test]
    fn reset_is_idempotent() {
        let mut s = CentroidStore::new(3, 2, Domain::Source);
        s.update(array![[1.0, 2.0]].view(), array![0.5].view(), &[1]).unwrap();
        assert!(!s.is_empty());
        s.reset();
        let once = s.clone();
        s.reset();
        assert_eq!(s, once);
        assert!(s.is_empty() && s.centroids().iter().all(|&v| v == 0.0));
        let t = CentroidStore::new(3, 2, Domain::Target);
        assert!(centroid_alignment_loss(&s, &t).is_none());
    }

    #[test]
    fn single_then_second_point() {
        let mut s = CentroidStore::new(2, 2, Domain::Source);
        s.update(array![[1.0, 0.0]].view(), array![0.8].view(), &[0]).unwrap();
        assert_eq!(s.centroids().row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(s.acc_weight()[0], 0.8);
        assert_eq!(s.acc_weight()[1], 0.0);

        s.update(array![[0.0, 1.0]].view(), array![0.2].view(), &[0]).unwrap();
        let c = s.centroids().row(0);
        assert!((c[0] - 0.8).abs() < 1e-12 && (c[1] - 0.2).abs() < 1e-12);
        assert!((s.acc_weight()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_contribution_is_ignored() {
        let mut s = CentroidStore::new(2, 1, Domain::Source);
        s.update(array![[3.0]].view(), array![0.0].view(), &[0]).unwrap();
        assert!(s.is_empty());
        assert!(matches!(
            s.update(array![[3.0]].view(), array![-0.1].view(), &[0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            s.update(array![[3.0]].view(), array![0.1].view(), &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn nearest_centroid() {
        let mut s = store_from(array![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]], Domain::Target);
        assert_eq!(s.nearest_centroid_labels(array![[0.0, 4.0]].view()).unwrap(), vec![2]);
        // (2, 0) is equidistant from classes 0 and 1
        assert_eq!(s.nearest_centroid_labels(array![[2.0, 0.0]].view()).unwrap(), vec![0]);
        assert_eq!(s.nearest_centroid_labels(array![[3.0, 0.5]].view()).unwrap(), vec![1]);

        s.acc_weight[1] = 0.0;
        assert_eq!(s.nearest_centroid_labels(array![[3.9, 0.0]].view()).unwrap(), vec![0]);
        s.reset();
        assert!(matches!(
            s.nearest_centroid_labels(array![[0.0, 0.0]].view()),
            Err(Error::CentroidsNotReady)
        ));
    }

    #[test]
    fn nearest_centroid_brute_force() {
        let s = store_from(array![[0.0, 0.0, 1.0], [2.0, -1.0, 0.5], [-1.0, 3.0, 0.0]], Domain::Target);
        let feats = array![[1.5, -0.5, 0.4], [0.1, 0.2, 0.9], [-0.5, 2.0, 0.1], [1.0, 1.0, 1.0]];
        let labels = s.nearest_centroid_labels(feats.view()).unwrap();
        for (row, &got) in feats.rows().into_iter().zip(&labels) {
            let dists: Vec<f64> = (0..3).map(|c| diff_norm(row, s.centroids().row(c))).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(dists.iter().position(|&d| d == min).unwrap(), got);
        }
        assert_eq!(labels[0], 1);
    }

    #[test]
    fn alignment_worked_example() {
        let s = store_from(array![[0.0, 0.0], [2.0, 0.0]], Domain::Source);
        let t = store_from(array![[0.0, 1.0], [2.0, 1.0]], Domain::Target);
        let expected = 4.0 / (2.0 + 2.0 * 5f64.sqrt());
        let v = centroid_alignment_loss(&s, &t).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.618034).abs() < 1e-6);
        let g = centroid_alignment_with_grad(&s, &t).unwrap();
        assert!((g.value - v).abs() < 1e-15);
    }

    #[test]
    fn perfect_alignment_is_zero() {
        let c = array![[0.0, 0.0], [1.0, 3.0], [-2.0, 1.0]];
        let s = store_from(c.clone(), Domain::Source);
        let t = store_from(c, Domain::Target);
        assert_eq!(centroid_alignment_loss(&s, &t), Some(0.0));
    }

    #[test]
    fn eligibility_gating() {
        let mut s = store_from(array![[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]], Domain::Source);
        let mut t = store_from(array![[0.0, 1.0], [2.0, 1.0], [-9.0, 9.0]], Domain::Target);
        t.acc_weight[2] = 0.0;
        let v = centroid_alignment_loss(&s, &t).unwrap();
        assert!((v - 4.0 / (2.0 + 2.0 * 5f64.sqrt())).abs() < 1e-12);
        s.acc_weight[1] = 0.0;
        assert!(centroid_alignment_loss(&s, &t).is_none());

        let same = store_from(array![[1.0, 1.0], [1.0, 1.0]], Domain::Source);
        let same_t = store_from(array![[1.0, 1.0], [1.0, 1.0]], Domain::Target);
        assert!(centroid_alignment_loss(&same, &same_t).is_none());
    }

    fn pairwise_oracle(cs: &Array2<f64>, ct: &Array2<f64>) -> f64 {
        let k = cs.nrows();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..k {
            for j in 0..k {
                let mut s = 0.0;
                for d in 0..cs.ncols() {
                    s += (cs[[i, d]] - ct[[j, d]]).powi(2);
                }
                den += s.sqrt();
                if i == j {
                    num += s.sqrt();
                }
            }
        }
        k as f64 * num / den
    }

    #[test]
    fn alignment_gradient_finite_differences() {
        let cs = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.4], [-0.7, 0.9, 0.1]];
        let ct = array![[0.1, -0.6, 1.7], [1.9, 0.0, 0.3], [-1.2, 1.4, 0.5]];
        let g = centroid_alignment_with_grad(&store_from(cs.clone(), Domain::Source), &store_from(ct.clone(), Domain::Target)).unwrap();
        let h = 1e-6;
        for (which, base, grad) in [(0, &cs, &g.g_source), (1, &ct, &g.g_target)] {
            for idx in 0..base.len() {
                let (i, j) = (idx / 3, idx % 3);
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m[[i, j]] += delta;
                    if which == 0 {
                        pairwise_oracle(&m, &ct)
                    } else {
                        pairwise_oracle(&cs, &m)
                    }
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((num - grad[[i, j]]).abs() < 1e-7, "{which} ({i},{j}): {num} vs {}", grad[[i, j]]);
            }
        }
    }

    #[test]
    fn update_backward_finite_differences() {
        let mut prior = CentroidStore::new(3, 2, Domain::Source);
        prior.update(array![[1.0, 1.0], [0.0, -1.0]].view(), array![0.7, 0.4].view(), &[0, 2]).unwrap();
        let feats = array![[0.5, 0.2], [1.5, -0.3], [-0.8, 0.9], [0.3, 0.3]];
        let w = array![0.6, 0.9, 0.4, 0.8];
        let labels = [0, 1, 0, 2];
        let g_c = array![[0.3, -1.1], [0.7, 0.2], [-0.5, 0.4]];

        let objective = |f: &Array2<f64>, w: &Array1<f64>| {
            let mut s = prior.clone();
            s.update(f.view(), w.view(), &labels).unwrap();
            (s.centroids() * &g_c).sum()
        };
        let mut after = prior.clone();
        after.update(feats.view(), w.view(), &labels).unwrap();
        let (gf, gw) = after.update_backward(feats.view(), w.view(), &labels, g_c.view());
        let h = 1e-6;
        for idx in 0..feats.len() {
            let (i, j) = (idx / 2, idx % 2);
            let mut fp = feats.clone();
            fp[[i, j]] += h;
            let mut fm = feats.clone();
            fm[[i, j]] -= h;
            let num = (objective(&fp, &w) - objective(&fm, &w)) / (2.0 * h);
            assert!((num - gf[[i, j]]).abs() < 1e-8);
        }
        for i in 0..4 {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let num = (objective(&feats, &wp) - objective(&feats, &wm)) / (2.0 * h);
            assert!((num - gw[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn streaming_matches_one_shot(
            points in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.01f64..1.0, 0usize..3), 1..60),
            cuts in proptest::collection::vec(0usize..60, 0..8),
        ) {
            let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % (points.len() + 1)).collect();
            bounds.push(0);
            bounds.push(points.len());
            bounds.sort_unstable();
            let mut store = CentroidStore::new(3, 2, Domain::Source);
            for w in bounds.windows(2) {
                let chunk = &points[w[0]..w[1]];
                if chunk.is_empty() { continue; }
                let f = Array2::from_shape_fn((chunk.len(), 2), |(i, j)| if j == 0 { chunk[i].0 } else { chunk[i].1 });
                let wt: Array1<f64> = chunk.iter().map(|p| p.2).collect();
                let lab: Vec<usize> = chunk.iter().map(|p| p.3).collect();
                store.update(f.view(), wt.view(), &lab).unwrap();
            }
            for c in 0..3 {
                let members: Vec<_> = points.iter().filter(|p| p.3 == c).collect();
                let total: f64 = members.iter().map(|p| p.2).sum();
                if members.is_empty() {
                    prop_assert_eq!(store.acc_weight()[c], 0.0);
                    continue;
                }
                let mx = members.iter().map(|p| p.0 * p.2).sum::<f64>() / total;
                let my = members.iter().map(|p| p.1 * p.2).sum::<f64>() / total;
                let got = store.centroids().row(c);
                prop_assert!((got[0] - mx).abs() <= 1e-9 * (1.0 + mx.abs()));
                prop_assert!((got[1] - my).abs() <= 1e-9 * (1.0 + my.abs()));
                // convex hull, checked coordinate-wise on bounding box
                let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.0), h.max(p.0)));
                prop_assert!(got[0] >= lo - 1e-9 && got[0] <= hi + 1e-9);
                prop_assert!((store.acc_weight()[c] - total).abs() < 1e-9);
            }
        }

        #[test]
        fn nearest_labels_permutation_invariant(
            rows in proptest::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 1..20),
            rot in 0usize..20,
        ) {
            let s = store_from(array![[0.0, 0.0], [3.0, 1.0], [-2.0, 2.5]], Domain::Target);
            let f = Array2::from_shape_fn((rows.len(), 2), |(i, j)| if j == 0 { rows[i].0 } else { rows[i].1 });
            let perm: Vec<usize> = (0..rows.len()).map(|i| (i + rot) % rows.len()).collect();
            let fp = f.select(ndarray::Axis(0), &perm);
            let a = s.nearest_centroid_labels(f.view()).unwrap();
            let b = s.nearest_centroid_labels(fp.view()).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert_eq!(b[i], a[pi]);
            }
        }

        #[test]
        fn alignment_non_negative_and_matches_oracle(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            shift in (-2.0f64..2.0, -2.0f64..2.0),
        ) {
            let cs = Array2::from_shape_vec((3, 2), vals[..6].to_vec()).unwrap();
            let ct = Array2::from_shape_vec((3, 2), vals[6..].to_vec()).unwrap();
            let s = store_from(cs.clone(), Domain::Source);
            let t = store_from(ct.clone(), Domain::Target);
            let v = centroid_alignment_loss(&s, &t).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - pairwise_oracle(&cs, &ct)).abs() < 1e-10);

            let mut moved = ct.clone();
            moved.column_mut(0).mapv_inplace(|x| x + shift.0);
            moved.column_mut(1).mapv_inplace(|x| x + shift.1);
            let vt = centroid_alignment_loss(&s, &store_from(moved.clone(), Domain::Target)).unwrap();
            prop_assert!((vt - pairwise_oracle(&cs, &moved)).abs() < 1e-10);
        }
    }
}
