#![allow(dead_code)]

use centroida::centroids::CentroidStore;
use centroida::data::{Domain, LabeledDataset, MeanLayout, ShiftSpec, SyntheticBenchmark, SyntheticSpec};
use centroida::model::{ModelSpec, ReferenceMlp};
use centroida::trainer::{evaluate_objective, CentroidLabels, ObjectiveBatch, ObjectiveWeights};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small three-class pair: `per_class` source and target rows per class.
pub fn small_pair(per_class: usize, seed: u64) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let spec = SyntheticSpec {
        num_classes: 3,
        dim: 4,
        source_counts: vec![per_class; 3],
        target_counts: vec![per_class; 3],
        test_per_class: 20,
        mean_radius: 3.0,
        noise_std: 0.7,
        shift: ShiftSpec::rotation(20.0),
        geometry_seed: 11,
        layout: MeanLayout::RandomSphere,
    };
    let bench = SyntheticBenchmark::new(spec).unwrap();
    (
        bench.source(seed).unwrap(),
        bench.target(seed + 1).unwrap(),
        bench.target_test(seed + 2).unwrap(),
    )
}

pub fn small_model(seed: u64) -> ReferenceMlp {
    ReferenceMlp::new(
        ModelSpec {
            input_dim: 4,
            hidden: vec![8],
            bottleneck: 4,
            num_classes: 3,
        },
        seed,
    )
    .unwrap()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

/// Fixed 8-sample micro-batch for a 4 -> 8 -> 4 network with three classes,
/// with both centroid stores already holding one earlier batch.
pub struct MicroBatch {
    pub model: ReferenceMlp,
    pub source_x: Array2<f64>,
    pub source_y: Vec<usize>,
    pub target_x: Array2<f64>,
    pub src_store: CentroidStore,
    pub tgt_store: CentroidStore,
}

impl MicroBatch {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(seed);
        // Finite differences are meaningless across a ReLU kink, so redraw
        // until every hidden pre-activation is well away from zero.
        let clear_of_kinks = |x: &Array2<f64>| {
            let fwd = model.forward(x.view()).unwrap();
            fwd.hidden_pre_activations().iter().all(|p| p.iter().all(|v| v.abs() > 1e-2))
        };
        let draw = |rng: &mut ChaCha8Rng| loop {
            let x = gaussian(8, 4, rng);
            if clear_of_kinks(&x) {
                break x;
            }
        };
        let source_x = draw(&mut rng);
        let source_y = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let target_x = draw(&mut rng);

        let mut src_store = CentroidStore::new(3, 4, Domain::Source);
        let mut tgt_store = CentroidStore::new(3, 4, Domain::Target);
        let warm_x = gaussian(12, 4, &mut rng);
        let warm = model.forward(warm_x.view()).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let w = ndarray::Array1::from_shape_fn(12, |i| 0.4 + 0.05 * i as f64);
        src_store.update(warm.features.view(), w.view(), &labels).unwrap();
        let warm_x = gaussian(12, 4, &mut rng);
        let warm = model.forward(warm_x.view()).unwrap();
        tgt_store.update(warm.features.view(), w.view(), &labels).unwrap();

        Self {
            model,
            source_x,
            source_y,
            target_x,
            src_store,
            tgt_store,
        }
    }

    /// Objective value and analytic gradient at `model`, starting from fresh
    /// copies of the warm stores.
    pub fn eval(&self, model: &ReferenceMlp, weights: ObjectiveWeights) -> (f64, centroida::model::ParamSet) {
        let mut s = self.src_store.clone();
        let mut t = self.tgt_store.clone();
        let batch = ObjectiveBatch {
            source_x: self.source_x.view(),
            source_y: &self.source_y,
            target_x: Some(self.target_x.view()),
        };
        let out = evaluate_objective(model, &batch, &mut s, &mut t, weights, 2.0, CentroidLabels::Classifier).unwrap();
        (out.value, out.grads)
    }

    /// Largest per-parameter relative error between the analytic gradient
    /// and central differences with step `h`.
    pub fn max_rel_error(&self, weights: ObjectiveWeights, h: f64) -> f64 {
        let (_, analytic) = self.eval(&self.model, weights);
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let mut plus = self.model.clone();
            let v = plus.params().get(i);
            plus.params_mut().set(i, v + h);
            let mut minus = self.model.clone();
            minus.params_mut().set(i, v - h);
            let numeric = (self.eval(&plus, weights).0 - self.eval(&minus, weights).0) / (2.0 * h);
            let a = analytic.get(i);
            worst = worst.max(rel_error(a, numeric));
        }
        worst
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

pub const CE_ONLY: ObjectiveWeights = ObjectiveWeights {
    ce: 1.0,
    lambda: None,
    gamma: None,
};
pub const LOSS_C_ONLY: ObjectiveWeights = ObjectiveWeights {
    ce: 0.0,
    lambda: Some(1.0),
    gamma: None,
};
pub const LOSS_D_ONLY: ObjectiveWeights = ObjectiveWeights {
    ce: 0.0,
    lambda: None,
    gamma: Some(1.0),
};
