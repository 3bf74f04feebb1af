//! Reference network: an MLP feature extractor ending in a linear
//! bottleneck, followed by a linear classifier. Gradients are computed by
//! explicit backpropagation.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths between input and bottleneck, each followed by ReLU.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    pub num_classes: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_bottleneck() -> usize {
    32
}

impl ModelSpec {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            bottleneck: default_bottleneck(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.bottleneck == 0 || self.num_classes == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidSpec(format!("all layer widths must be positive: {self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.bottleneck);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine map `x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound)),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Ordered list of layers; used for the weights themselves and for
/// gradients and momentum buffers of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Linear>,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Linear::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    /// All scalars in tensor order (each layer's weight, row-major, then bias).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weight.len() {
                return l.weight.as_slice().expect("standard layout")[index];
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weight.len() {
                l.weight.as_slice_mut().expect("standard layout")[index] = value;
                return;
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Tensor names in [`ParamSet::values`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let n = self.layers.len();
        let mut names = Vec::with_capacity(2 * n);
        for i in 0..n {
            let prefix = if i + 1 == n {
                "classifier".to_string()
            } else {
                format!("feature.{i}")
            };
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        }
        names
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let names = self.tensor_names();
        self.layers.iter().enumerate().find_map(|(i, l)| {
            if l.weight.iter().any(|v| !v.is_finite()) {
                Some(names[2 * i].clone())
            } else if l.bias.iter().any(|v| !v.is_finite()) {
                Some(names[2 * i + 1].clone())
            } else {
                None
            }
        })
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
}

impl Forward {
    /// Pre-activations of the ReLU layers, one matrix per hidden layer.
    pub fn hidden_pre_activations(&self) -> &[Array2<f64>] {
        &self.pre[..self.pre.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMlp {
    spec: ModelSpec,
    params: ParamSet,
}

impl ReferenceMlp {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .shapes()
            .into_iter()
            .map(|(i, o)| Linear::uniform(i, o, &mut rng))
            .collect();
        Ok(Self {
            spec,
            params: ParamSet { layers },
        })
    }

    /// Builds a model from explicit layers; the last one is the classifier.
    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidSpec("need at least one feature layer and a classifier".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::Shape(format!("layer {i}: bias length != output width")));
            }
        }
        for w in layers.windows(2) {
            if w[0].weight.ncols() != w[1].weight.nrows() {
                return Err(Error::Shape("consecutive layer widths do not chain".into()));
            }
        }
        let n = layers.len();
        let spec = ModelSpec {
            input_dim: layers[0].weight.nrows(),
            hidden: layers[..n - 2].iter().map(|l| l.weight.ncols()).collect(),
            bottleneck: layers[n - 2].weight.ncols(),
            num_classes: layers[n - 1].weight.ncols(),
        };
        spec.validate()?;
        Ok(Self {
            spec,
            params: ParamSet { layers },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.bottleneck
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "batch width {} != model input width {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        if let Some(name) = self.params.first_non_finite() {
            return Err(Error::NonFiniteInput(format!("parameter {name}")));
        }
        let layers = &self.params.layers;
        let n_feat = layers.len() - 1;
        let mut inputs = Vec::with_capacity(n_feat);
        let mut pre = Vec::with_capacity(n_feat);
        let mut h = x.to_owned();
        for (i, layer) in layers[..n_feat].iter().enumerate() {
            let z = layer.apply(h.view());
            inputs.push(h);
            h = if i + 1 < n_feat { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        let features = h;
        let logits = layers[n_feat].apply(features.view());
        if features.iter().chain(logits.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("forward activations".into()));
        }
        Ok(Forward {
            inputs,
            pre,
            features,
            logits,
        })
    }

    /// Evaluation-mode features and logits.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let f = self.forward(x)?;
        Ok((f.features, f.logits))
    }

    /// Parameter gradients given upstream gradients on the features and on
    /// the logits of one forward pass.
    pub fn backward(&self, fwd: &Forward, g_features: ArrayView2<'_, f64>, g_logits: ArrayView2<'_, f64>) -> ParamSet {
        let layers = &self.params.layers;
        let n_feat = layers.len() - 1;
        let mut grads = ParamSet::zeros_like(&self.params);

        let cls = &layers[n_feat];
        grads.layers[n_feat].weight = fwd.features.t().dot(&g_logits);
        grads.layers[n_feat].bias = g_logits.sum_axis(Axis(0));
        let mut g = &g_features + &g_logits.dot(&cls.weight.t());

        for i in (0..n_feat).rev() {
            if i + 1 < n_feat {
                Zip::from(&mut g).and(&fwd.pre[i]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            grads.layers[i].weight = fwd.inputs[i].t().dot(&g);
            grads.layers[i].bias = g.sum_axis(Axis(0));
            if i > 0 {
                g = g.dot(&layers[i].weight.t());
            }
        }
        grads
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let names = self.params.tensor_names();
        let mut tensors = Vec::with_capacity(names.len());
        for (i, l) in self.params.layers.iter().enumerate() {
            tensors.push(NamedTensor {
                name: names[2 * i].clone(),
                shape: l.weight.shape().to_vec(),
                data: l.weight.iter().copied().collect(),
            });
            tensors.push(NamedTensor {
                name: names[2 * i + 1].clone(),
                shape: vec![l.bias.len()],
                data: l.bias.to_vec(),
            });
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            spec: self.spec.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format `{}`", ckpt.format)));
        }
        ckpt.spec.validate()?;
        let shapes = ckpt.spec.shapes();
        if ckpt.tensors.len() != 2 * shapes.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, the model needs {}",
                ckpt.tensors.len(),
                2 * shapes.len()
            )));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (pair, &(i, o)) in ckpt.tensors.chunks(2).zip(&shapes) {
            let (w, b) = (&pair[0], &pair[1]);
            if w.shape != [i, o] || b.shape != [o] {
                return Err(Error::Shape(format!("tensor {} / {} do not match [{i}, {o}]", w.name, b.name)));
            }
            layers.push(Linear {
                weight: Array2::from_shape_vec((i, o), w.data.clone()).map_err(|e| Error::Shape(e.to_string()))?,
                bias: Array1::from(b.data.clone()),
            });
        }
        let model = Self {
            spec: ckpt.spec.clone(),
            params: ParamSet { layers },
        };
        let names = model.params.tensor_names();
        if let Some(t) = ckpt.tensors.iter().zip(&names).find(|(t, n)| &t.name != *n) {
            return Err(Error::InvalidInput(format!("unexpected tensor name `{}`", t.0.name)));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "centroida-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint; floats use shortest round-trip formatting so a
/// save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub tensors: Vec<NamedTensor>,
}

/// SGD with classical momentum: `v <- m v + g`, `theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<ParamSet>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteInput(format!("gradient of {name}")));
        }
        let m = self.momentum;
        let v = self.velocity.get_or_insert_with(|| ParamSet::zeros_like(params));
        for ((p, vel), g) in params.layers.iter_mut().zip(&mut v.layers).zip(&grads.layers) {
            vel.weight.mapv_inplace(|x| x * m);
            vel.weight += &g.weight;
            vel.bias.mapv_inplace(|x| x * m);
            vel.bias += &g.bias;
            p.weight.scaled_add(-lr, &vel.weight);
            p.bias.scaled_add(-lr, &vel.bias);
        }
        Ok(())
    }
}

/// `lr0 / (1 + 10 alpha)^0.75` for training progress `alpha` in `[0, 1]`.
pub fn lr_schedule(alpha: f64, lr0: f64) -> f64 {
    lr0 / (1.0 + 10.0 * alpha).powf(0.75)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny() -> ReferenceMlp {
        ReferenceMlp::new(
            ModelSpec {
                input_dim: 3,
                hidden: vec![5],
                bottleneck: 4,
                num_classes: 2,
            },
            17,
        )
        .unwrap()
    }

    #[test]
    fn init_within_bounds() {
        let m = tiny();
        for (l, fan_in) in m.params().layers().iter().zip([3.0f64, 5.0, 4.0]) {
            let b = 1.0 / fan_in.sqrt();
            assert!(l.weight.iter().chain(l.bias.iter()).all(|v| v.abs() <= b));
        }
        assert_eq!(m.params().len(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let layers = vec![Linear::zeros(3, 5), Linear::zeros(5, 4), Linear::zeros(4, 2)];
        let m = ReferenceMlp::from_layers(layers).unwrap();
        let (_, logits) = m.predict(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut m = tiny();
        for l in &mut m.params_mut().layers {
            l.bias.fill(0.0);
        }
        let (f, _) = m.predict(Array2::zeros((2, 3)).view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let feat = Linear {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let m = ReferenceMlp::from_layers(vec![feat, Linear::zeros(2, 3)]).unwrap();
        let x = array![[1.5, -2.0], [0.0, 3.0]];
        let (f, _) = m.predict(x.view()).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(tiny().forward(Array2::zeros((1, 4)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_parameter_detected() {
        let mut m = tiny();
        m.params_mut().set(3, f64::NAN);
        let err = m.forward(Array2::ones((1, 3)).view()).unwrap_err();
        assert!(err.to_string().contains("feature.0.weight"), "{err}");
    }

    #[test]
    fn sum_of_logits_gradient() {
        let m = tiny();
        let x = array![[0.3, -1.0, 0.8], [1.2, 0.4, -0.5], [-0.7, 0.9, 0.2]];
        let fwd = m.forward(x.view()).unwrap();
        let g = m.backward(&fwd, Array2::zeros((3, 4)).view(), Array2::ones((3, 2)).view());
        let h = 1e-4;
        let analytic: Vec<f64> = g.values().collect();
        for idx in 0..m.params().len() {
            let eval = |delta: f64| {
                let mut p = m.clone();
                let v = p.params().get(idx);
                p.params_mut().set(idx, v + delta);
                p.predict(x.view()).unwrap().1.sum()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (num - analytic[idx]).abs() / (num.abs() + analytic[idx].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {idx}: {num} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn sgd_examples() {
        let single = |v: f64| ParamSet {
            layers: vec![Linear {
                weight: array![[v]],
                bias: array![0.0],
            }],
        };
        let mut p = single(0.0);
        Sgd::new(0.0).step(&mut p, &single(1.0), 0.1).unwrap();
        assert!((p.get(0) + 0.1).abs() < 1e-15);

        let mut p = single(0.0);
        let mut opt = Sgd::new(0.9);
        opt.step(&mut p, &single(1.0), 0.1).unwrap();
        opt.step(&mut p, &single(1.0), 0.1).unwrap();
        assert!((p.get(0) + 0.29).abs() < 1e-12);

        let mut p = single(0.7);
        let mut opt = Sgd::new(0.9);
        for _ in 0..10 {
            opt.step(&mut p, &single(0.0), 0.1).unwrap();
        }
        assert_eq!(p.get(0), 0.7);

        let err = Sgd::new(0.9).step(&mut p, &single(f64::INFINITY), 0.1).unwrap_err();
        assert!(err.to_string().contains("classifier.weight"));
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_schedule(0.0, 0.005), 0.005);
        assert!((lr_schedule(1.0, 1.0) - 0.165560).abs() < 1e-6);
        assert!((lr_schedule(1.0, 1.0) - 11f64.powf(-0.75)).abs() < 1e-15);
        let grid: Vec<f64> = (0..=100).map(|i| lr_schedule(i as f64 / 100.0, 0.01)).collect();
        assert!(grid.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let mut ckpt = tiny().to_checkpoint();
        ckpt.tensors[0].shape = vec![5, 3];
        assert!(ReferenceMlp::from_checkpoint(&ckpt).is_err());
        let mut ckpt = tiny().to_checkpoint();
        ckpt.format = "other".into();
        assert!(ReferenceMlp::from_checkpoint(&ckpt).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6) {
            let m = ReferenceMlp::new(ModelSpec { input_dim: 3, hidden: vec![hidden], bottleneck: 2, num_classes: 3 }, seed).unwrap();
            let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
            let back = ReferenceMlp::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
            let a: Vec<u64> = m.params().values().map(f64::to_bits).collect();
            let b: Vec<u64> = back.params().values().map(f64::to_bits).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.spec(), m.spec());
        }
    }
}
