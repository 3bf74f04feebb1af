//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or JSON text and returns JSON text, so the
//! page needs no generated TypeScript types. The `*_json` functions hold the
//! logic and are callable (and tested) natively.

use centroida::calibration::ProbBatch;
use centroida::data::{
    apply_sampling_protocol, kept_count, protocol_counts, ClassOrder, ImbalanceSpec, MeanLayout, ShiftSpec, SyntheticBenchmark,
    SyntheticSpec,
};
use centroida::eval::evaluate;
use centroida::model::{ModelSpec, ReferenceMlp};
use centroida::derive_seed;
use centroida::trainer::{TrainConfig, Trainer, Variant};
use ndarray::Array2;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn to_json(value: &impl Serialize) -> Out {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Kept per-class counts of the long-tail protocol.
pub fn protocol_counts_json(n_max: usize, num_classes: usize, p: f64) -> Out {
    let counts = protocol_counts(n_max, num_classes, p).map_err(|e| e.to_string())?;
    to_json(&counts)
}

#[derive(Serialize)]
struct Profile {
    probs: Vec<Vec<f64>>,
    max_prob: Vec<f64>,
    entropy: Vec<f64>,
    weight: Vec<f64>,
}

/// Tempered probabilities, confidence, entropy and batch weights for a
/// batch of logits given as a JSON array of rows.
pub fn calibration_profile_json(logits: &str, temperature: f64) -> Out {
    let rows: Vec<Vec<f64>> = serde_json::from_str(logits).map_err(|e| format!("logits: {e}"))?;
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err("logits must be a non-empty rectangular array".into());
    }
    let m = Array2::from_shape_vec((rows.len(), width), rows.concat()).map_err(|e| e.to_string())?;
    let b = ProbBatch::from_logits(m.view(), temperature).map_err(|e| e.to_string())?;
    to_json(&Profile {
        probs: b.probs.rows().into_iter().map(|r| r.to_vec()).collect(),
        max_prob: b.max_prob.to_vec(),
        entropy: b.entropy.to_vec(),
        weight: b.weight.to_vec(),
    })
}

#[derive(Serialize)]
struct Point {
    x: f64,
    y: f64,
    label: usize,
    pred: usize,
}

#[derive(Serialize)]
struct DemoResult {
    variant: String,
    mean_acc: f64,
    per_class_acc: Vec<Option<f64>>,
    target_counts: Vec<usize>,
    source: Vec<[f64; 3]>,
    test: Vec<Point>,
    source_centroids: Vec<[f64; 2]>,
    target_centroids: Vec<[f64; 2]>,
    loss: Vec<[f64; 4]>,
}

/// Trains one variant on a three-class 2-D pair and returns everything the
/// page plots: source points, test predictions, the final epoch's centroids
/// and the loss trace.
pub fn train_demo_json(rotation_deg: f64, p_target: f64, variant: &str, epochs: usize, seed: u64) -> Out {
    let variant: Variant = variant.parse().map_err(|e: centroida::Error| e.to_string())?;
    if !(1..=200).contains(&epochs) {
        return Err("epochs must lie in 1..=200".into());
    }
    let spec = SyntheticSpec {
        num_classes: 3,
        dim: 2,
        source_counts: vec![150, 90, 50],
        target_counts: vec![150; 3],
        test_per_class: 60,
        mean_radius: 3.0,
        noise_std: 0.8,
        shift: ShiftSpec::rotation(rotation_deg),
        geometry_seed: 5,
        layout: MeanLayout::RandomSphere,
    };
    let bench = SyntheticBenchmark::new(spec).map_err(|e| e.to_string())?;
    let err = |e: centroida::Error| e.to_string();
    let source = bench.source(derive_seed(seed, 1)).map_err(err)?;
    let mut target = bench.target(derive_seed(seed, 2)).map_err(err)?;
    let mut target_counts = bench.spec().target_counts.clone();
    if p_target < 1.0 {
        // Reversed ranking: the source's smallest class becomes the target's largest.
        let ranking = vec![2, 1, 0];
        let n_max = target_counts.iter().copied().max().unwrap_or(0);
        for (rank, &class) in ranking.iter().enumerate() {
            target_counts[class] = kept_count(n_max, rank, 3, p_target).min(target_counts[class]);
        }
        let protocol =
            ImbalanceSpec::new(p_target, derive_seed(seed, 5)).with_order(ClassOrder::GivenPermutation(ranking));
        target = apply_sampling_protocol(&target, &protocol).map_err(err)?;
    }
    let test = bench.target_test(derive_seed(seed, 3)).map_err(err)?;

    let model = ReferenceMlp::new(
        ModelSpec {
            input_dim: 2,
            hidden: vec![32],
            bottleneck: 16,
            num_classes: 3,
        },
        derive_seed(seed, 6),
    )
    .map_err(err)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        lr0: 0.01,
        ..TrainConfig::default()
    }
    .for_variant(variant);
    let state = Trainer::new(cfg, model, &source, &target, seed).map_err(err)?.train().map_err(err)?;
    let report = evaluate(&state.model, &test).map_err(err)?;

    let (_, logits) = state.model.predict(test.features()).map_err(err)?;
    let preds = centroida::calibration::argmax_rows(logits.view());
    let test_points = test
        .features()
        .rows()
        .into_iter()
        .zip(test.labels())
        .zip(preds)
        .map(|((r, &label), pred)| Point {
            x: r[0],
            y: r[1],
            label,
            pred,
        })
        .collect();

    // Centroids live in feature space; draw each at the mean input position
    // of the points assigned to it.
    let (src_feats, _) = state.model.predict(source.features()).map_err(err)?;
    let src_c = input_space_centroids(&state.src_store, source.features(), src_feats.view());
    let (tgt_feats, _) = state.model.predict(target.features()).map_err(err)?;
    let tgt_c = input_space_centroids(&state.tgt_store, target.features(), tgt_feats.view());

    to_json(&DemoResult {
        variant: variant.to_string(),
        mean_acc: report.mean_acc,
        per_class_acc: report.per_class_acc,
        target_counts,
        source: source
            .features()
            .rows()
            .into_iter()
            .zip(source.labels())
            .map(|(r, &l)| [r[0], r[1], l as f64])
            .collect(),
        test: test_points,
        source_centroids: src_c,
        target_centroids: tgt_c,
        loss: state
            .loss_trace
            .iter()
            .map(|r| [r.ce, r.loss_c, r.loss_d, r.total])
            .collect(),
    })
}

fn input_space_centroids(
    store: &centroida::centroids::CentroidStore,
    inputs: ndarray::ArrayView2<'_, f64>,
    feats: ndarray::ArrayView2<'_, f64>,
) -> Vec<[f64; 2]> {
    let labels = match store.nearest_centroid_labels(feats) {
        Ok(l) => l,
        Err(_) => return Vec::new(),
    };
    (0..store.num_classes())
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if rows.is_empty() {
                return [f64::NAN, f64::NAN];
            }
            let n = rows.len() as f64;
            let sx: f64 = rows.iter().map(|&i| inputs[[i, 0]]).sum();
            let sy: f64 = rows.iter().map(|&i| inputs[[i, 1]]).sum();
            [sx / n, sy / n]
        })
        .collect()
}

#[wasm_bindgen(js_name = protocolCounts)]
pub fn protocol_counts_js(n_max: usize, num_classes: usize, p: f64) -> Result<String, JsError> {
    protocol_counts_json(n_max, num_classes, p).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = calibrationProfile)]
pub fn calibration_profile_js(logits: &str, temperature: f64) -> Result<String, JsError> {
    calibration_profile_json(logits, temperature).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainDemo)]
pub fn train_demo_js(rotation_deg: f64, p_target: f64, variant: &str, epochs: usize, seed: u64) -> Result<String, JsError> {
    train_demo_json(rotation_deg, p_target, variant, epochs, seed).map_err(|e| JsError::new(&e))
}
