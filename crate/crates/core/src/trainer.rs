//! Training loop: per-epoch centroid reset, per-iteration centroid updates,
//! and the objective `CE + lambda * loss_c + gamma(alpha) * loss_d`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::alignment::{class_wise_loss_with_grad, PairAssignment};
use crate::calibration::{ProbBatch, DEFAULT_TEMPERATURE};
use crate::centroids::{centroid_alignment_with_grad, CentroidStore};
use crate::data::{BatchSampler, ClassBalancedSampler, Domain, LabeledDataset, UniformSampler};
use crate::error::{Error, Result};
use crate::model::{lr_schedule, ParamSet, ReferenceMlp, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaForm {
    /// `2 / (1 + exp(-10 alpha)) - 1`, rising from 0 to about 1.
    #[default]
    SigmoidRamp,
    /// `2 / exp(-10 alpha) - 1 = 2 exp(10 alpha) - 1`.
    Literal,
}

pub fn gamma_schedule(alpha: f64, form: GammaForm) -> f64 {
    match form {
        GammaForm::SigmoidRamp => 2.0 / (1.0 + (-10.0 * alpha).exp()) - 1.0,
        GammaForm::Literal => 2.0 / (-10.0 * alpha).exp() - 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceSampling {
    #[default]
    Balanced,
    Uniform,
}

/// Labels used when folding source rows into the source centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CentroidLabels {
    #[default]
    Classifier,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    RmResample,
    RmLossC,
    RmLossD,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::RmResample,
        Variant::RmLossC,
        Variant::RmLossD,
        Variant::SourceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RmResample => "rm_resample",
            Variant::RmLossC => "rm_loss_c",
            Variant::RmLossD => "rm_loss_d",
            Variant::SourceOnly => "source_only",
        }
    }

    /// Switches the relevant knobs of `config` off.
    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::RmResample => config.source_sampling = SourceSampling::Uniform,
            Variant::RmLossC => config.lambda = 0.0,
            Variant::RmLossD => config.use_gamma = false,
            Variant::SourceOnly => {
                config.lambda = 0.0;
                config.use_gamma = false;
                config.use_target = false;
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub gamma_form: GammaForm,
    /// When false, gamma is held at 0 and the class-wise loss is skipped.
    pub use_gamma: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: bool,
    pub momentum: f64,
    pub source_sampling: SourceSampling,
    pub source_centroid_labels: CentroidLabels,
    /// When false, no target batches are drawn.
    pub use_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            temperature: DEFAULT_TEMPERATURE,
            gamma_form: GammaForm::SigmoidRamp,
            use_gamma: true,
            batch_size: 50,
            epochs: 50,
            lr0: 0.005,
            lr_decay: true,
            momentum: 0.9,
            source_sampling: SourceSampling::Balanced,
            source_centroid_labels: CentroidLabels::Classifier,
            use_target: true,
        }
    }
}

impl TrainConfig {
    pub fn for_variant(mut self, variant: Variant) -> Self {
        variant.apply(&mut self);
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            out.push("epochs must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            out.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        out
    }
}

/// Per-term weights of one objective evaluation. A `None` term is not
/// computed at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub ce: f64,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
}

pub struct ObjectiveBatch<'a> {
    pub source_x: ArrayView2<'a, f64>,
    pub source_y: &'a [usize],
    pub target_x: Option<ArrayView2<'a, f64>>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub ce: f64,
    /// `None` when disabled or inactive this iteration.
    pub loss_c: Option<f64>,
    pub loss_d: Option<f64>,
    pub value: f64,
    pub grads: ParamSet,
    /// Whether target labels for the class-wise loss came from the
    /// centroids (false: classifier fallback).
    pub corrected_labels: bool,
}

/// Mean softmax cross-entropy on raw logits and its gradient.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, &v) in row.iter().enumerate() {
            g[j] = ((v - log_z).exp() - if j == y { 1.0 } else { 0.0 }) / b;
        }
    }
    (loss / b, grad)
}

/// Evaluates the weighted objective on one source/target batch pair and
/// its exact parameter gradient.
///
/// Both stores are updated with the batch first (classifier labels, `P^max`
/// weights). The alignment losses are then taken on the updated stores, with
/// their pre-batch contents treated as constants.
pub fn evaluate_objective(
    model: &ReferenceMlp,
    batch: &ObjectiveBatch<'_>,
    src_store: &mut CentroidStore,
    tgt_store: &mut CentroidStore,
    weights: ObjectiveWeights,
    temperature: f64,
    centroid_labels: CentroidLabels,
) -> Result<ObjectiveOutput> {
    let fwd_s = model.forward(batch.source_x)?;
    let prob_s = ProbBatch::from_logits(fwd_s.logits.view(), temperature)?;
    let (ce, g_ce) = cross_entropy(fwd_s.logits.view(), batch.source_y);

    let src_labels = match centroid_labels {
        CentroidLabels::Classifier => prob_s.argmax(),
        CentroidLabels::GroundTruth => batch.source_y.to_vec(),
    };
    src_store.update(fwd_s.features.view(), prob_s.max_prob.view(), &src_labels)?;

    let mut g_fs = Array2::<f64>::zeros(fwd_s.features.raw_dim());
    let mut g_pmax_s = Array1::<f64>::zeros(prob_s.len());
    let mut g_w_s = Array1::<f64>::zeros(prob_s.len());
    let mut loss_c = None;
    let mut loss_d = None;
    let mut corrected_labels = false;
    let mut target_grads = None;

    if let Some(target_x) = batch.target_x {
        let fwd_t = model.forward(target_x)?;
        let prob_t = ProbBatch::from_logits(fwd_t.logits.view(), temperature)?;
        let tgt_cls = prob_t.argmax();
        tgt_store.update(fwd_t.features.view(), prob_t.max_prob.view(), &tgt_cls)?;

        let mut g_ft = Array2::<f64>::zeros(fwd_t.features.raw_dim());
        let mut g_pmax_t = Array1::<f64>::zeros(prob_t.len());
        let mut g_w_t = Array1::<f64>::zeros(prob_t.len());
        let mut active = false;

        if let Some(lambda) = weights.lambda {
            if let Some(align) = centroid_alignment_with_grad(src_store, tgt_store) {
                loss_c = Some(align.value);
                let (gf, gp) = src_store.update_backward(
                    fwd_s.features.view(),
                    prob_s.max_prob.view(),
                    &src_labels,
                    (align.g_source * lambda).view(),
                );
                g_fs += &gf;
                g_pmax_s += &gp;
                let (gf, gp) = tgt_store.update_backward(
                    fwd_t.features.view(),
                    prob_t.max_prob.view(),
                    &tgt_cls,
                    (align.g_target * lambda).view(),
                );
                g_ft += &gf;
                g_pmax_t += &gp;
                active = true;
            }
        }

        if let Some(gamma) = weights.gamma {
            let tgt_labels = match tgt_store.nearest_centroid_labels(fwd_t.features.view()) {
                Ok(l) => {
                    corrected_labels = true;
                    l
                }
                Err(Error::CentroidsNotReady) => tgt_cls.clone(),
                Err(e) => return Err(e),
            };
            let assign = PairAssignment::new(
                fwd_s.features.view(),
                fwd_t.features.view(),
                src_labels.clone(),
                tgt_labels,
                prob_s.weight.clone(),
                prob_t.weight.clone(),
            )?;
            if let Some(cw) = class_wise_loss_with_grad(fwd_s.features.view(), fwd_t.features.view(), &assign) {
                loss_d = Some(cw.loss.value);
                g_fs.scaled_add(gamma, &cw.g_source_feats);
                g_w_s.scaled_add(gamma, &cw.g_source_weights);
                g_ft.scaled_add(gamma, &cw.g_target_feats);
                g_w_t.scaled_add(gamma, &cw.g_target_weights);
                active = true;
            }
        }

        if active {
            let g_zt = prob_t.backward(&g_pmax_t, &g_w_t);
            target_grads = Some(model.backward(&fwd_t, g_ft.view(), g_zt.view()));
        }
    }

    let mut g_zs = g_ce * weights.ce;
    if loss_c.is_some() || loss_d.is_some() {
        g_zs += &prob_s.backward(&g_pmax_s, &g_w_s);
    }
    let mut grads = model.backward(&fwd_s, g_fs.view(), g_zs.view());
    if let Some(tg) = target_grads {
        grads.add_scaled(1.0, &tg);
    }

    let value = weights.ce * ce
        + weights.lambda.unwrap_or(0.0) * loss_c.unwrap_or(0.0)
        + weights.gamma.unwrap_or(0.0) * loss_d.unwrap_or(0.0);
    Ok(ObjectiveOutput {
        ce,
        loss_c,
        loss_d,
        value,
        grads,
        corrected_labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub epoch: usize,
    pub ce: f64,
    pub loss_c: f64,
    pub loss_d: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,ce,loss_c,loss_d,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.ce, self.loss_c, self.loss_d, self.total)
    }
}

pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub iteration: usize,
    pub total_iterations: usize,
    pub model: ReferenceMlp,
    pub src_store: CentroidStore,
    pub tgt_store: CentroidStore,
    pub loss_trace: Vec<LossRecord>,
    optimizer: Sgd,
}

impl TrainState {
    /// Fraction of planned iterations completed.
    pub fn alpha(&self) -> f64 {
        if self.total_iterations == 0 {
            0.0
        } else {
            (self.iteration as f64 / self.total_iterations as f64).min(1.0)
        }
    }
}

/// Owns the samplers and the training state for one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    source: &'a LabeledDataset,
    target: &'a LabeledDataset,
    source_sampler: Box<dyn BatchSampler + Send + 'a>,
    target_sampler: UniformSampler,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        model: ReferenceMlp,
        source: &'a LabeledDataset,
        target: &'a LabeledDataset,
        seed: u64,
    ) -> Result<Self> {
        if let Some(problem) = config.validate().into_iter().next() {
            return Err(Error::Config(problem));
        }
        if source.domain() != Domain::Source || target.domain() != Domain::Target {
            return Err(Error::InvalidInput("expected a source and a target dataset".into()));
        }
        if source.dim() != model.spec().input_dim || target.dim() != model.spec().input_dim {
            return Err(Error::Shape("dataset width differs from model input width".into()));
        }
        if source.num_classes() != model.num_classes() {
            return Err(Error::Shape("dataset class count differs from model output width".into()));
        }
        let source_sampler: Box<dyn BatchSampler + Send> = match config.source_sampling {
            SourceSampling::Balanced => Box::new(ClassBalancedSampler::new(
                source,
                config.batch_size,
                crate::derive_seed(seed, 10),
            )?),
            SourceSampling::Uniform => Box::new(UniformSampler::new(
                source.len(),
                config.batch_size,
                crate::derive_seed(seed, 10),
            )?),
        };
        let target_sampler = UniformSampler::new(target.len(), config.batch_size, crate::derive_seed(seed, 11))?;
        let total_iterations = config.epochs * source_sampler.batches_per_epoch();
        let (k, d) = (model.num_classes(), model.feature_dim());
        let state = TrainState {
            epoch: 0,
            iteration: 0,
            total_iterations,
            model,
            src_store: CentroidStore::new(k, d, Domain::Source),
            tgt_store: CentroidStore::new(k, d, Domain::Target),
            loss_trace: Vec::new(),
            optimizer: Sgd::new(config.momentum),
        };
        Ok(Self {
            config,
            source,
            target,
            source_sampler,
            target_sampler,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.source_sampler.batches_per_epoch()
    }

    /// Resets both centroid stores.
    pub fn begin_epoch(&mut self) {
        self.state.src_store.reset();
        self.state.tgt_store.reset();
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossRecord> {
        let cfg = &self.config;
        let state = &mut self.state;
        let alpha = state.alpha();
        let gamma = if cfg.use_gamma {
            gamma_schedule(alpha, cfg.gamma_form)
        } else {
            0.0
        };
        let lr = if cfg.lr_decay {
            lr_schedule(alpha, cfg.lr0)
        } else {
            cfg.lr0
        };

        let src_rows = self.source_sampler.next_batch();
        let src_x = self.source.select_features(&src_rows);
        let src_y = self.source.select_labels(&src_rows);
        let tgt_x = if cfg.use_target {
            let rows = self.target_sampler.next_batch();
            Some(self.target.select_features(&rows))
        } else {
            None
        };

        let weights = ObjectiveWeights {
            ce: 1.0,
            lambda: (cfg.use_target && cfg.lambda > 0.0).then_some(cfg.lambda),
            gamma: (cfg.use_target && cfg.use_gamma).then_some(gamma),
        };
        let batch = ObjectiveBatch {
            source_x: src_x.view(),
            source_y: &src_y,
            target_x: tgt_x.as_ref().map(|t| t.view()),
        };
        let iteration = state.iteration;
        let abort = |component: &str| Error::NonFinite {
            component: component.to_string(),
            iteration,
        };
        let out = evaluate_objective(
            &state.model,
            &batch,
            &mut state.src_store,
            &mut state.tgt_store,
            weights,
            cfg.temperature,
            cfg.source_centroid_labels,
        )
        .map_err(|e| match e {
            Error::NonFiniteInput(what) => abort(&what),
            other => other,
        })?;

        let loss_c = out.loss_c.unwrap_or(0.0);
        let loss_d = out.loss_d.unwrap_or(0.0);
        for (name, v) in [("cross-entropy", out.ce), ("loss_c", loss_c), ("loss_d", loss_d)] {
            if !v.is_finite() {
                return Err(abort(name));
            }
        }
        let record = LossRecord {
            iter: iteration,
            epoch: state.epoch,
            ce: out.ce,
            loss_c,
            loss_d,
            lambda: cfg.lambda,
            gamma,
            total: out.ce + cfg.lambda * loss_c + gamma * loss_d,
        };
        if !record.total.is_finite() {
            return Err(abort("total loss"));
        }

        state
            .optimizer
            .step(state.model.params_mut(), &out.grads, lr)
            .map_err(|e| match e {
                Error::NonFiniteInput(what) => abort(&what),
                other => other,
            })?;
        state.loss_trace.push(record);
        state.iteration += 1;
        Ok(record)
    }

    pub fn train_epoch(&mut self) -> Result<()> {
        self.begin_epoch();
        for _ in 0..self.iterations_per_epoch() {
            self.step()?;
        }
        self.state.epoch += 1;
        Ok(())
    }

    /// Runs every configured epoch.
    pub fn train(mut self) -> Result<TrainState> {
        for _ in 0..self.config.epochs {
            self.train_epoch()?;
        }
        Ok(self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_schedule(0.0, GammaForm::SigmoidRamp), 0.0);
        let g1 = gamma_schedule(1.0, GammaForm::SigmoidRamp);
        assert!((g1 - (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-15);
        assert!((g1 - 0.9999092).abs() < 1e-7);
        let grid: Vec<f64> = (0..=50).map(|i| gamma_schedule(i as f64 / 50.0, GammaForm::SigmoidRamp)).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));

        assert_eq!(gamma_schedule(0.0, GammaForm::Literal), 1.0);
        assert!((gamma_schedule(1.0, GammaForm::Literal) - (2.0 * 10f64.exp() - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn variant_parsing_and_knobs() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::UnknownVariant(_))));

        let c = TrainConfig::default().for_variant(Variant::RmLossC);
        assert_eq!(c.lambda, 0.0);
        let c = TrainConfig::default().for_variant(Variant::RmLossD);
        assert!(!c.use_gamma);
        let c = TrainConfig::default().for_variant(Variant::RmResample);
        assert_eq!(c.source_sampling, SourceSampling::Uniform);
        let c = TrainConfig::default().for_variant(Variant::SourceOnly);
        assert!(!c.use_target && c.lambda == 0.0 && !c.use_gamma);
    }

    #[test]
    fn cross_entropy_matches_direct() {
        let z = ndarray::array![[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
        let (l, _) = cross_entropy(z.view(), &[1, 0]);
        let row = |r: [f64; 3], y: usize| -(r[y].exp() / r.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let expected = (row([1.0, 2.0, 0.5], 1) + row([-1.0, 0.0, 3.0], 0)) / 2.0;
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_empty());
        c.lambda = -1.0;
        c.temperature = 0.0;
        c.batch_size = 0;
        assert_eq!(c.validate().len(), 3);
    }
}
