//! Gaussian-mixture source/target pairs with a shared covariate shift.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Domain, LabeledDataset};
use crate::error::{Error, Result};

/// Transform applied to every class mean of the target domain:
/// `mu_t = scale * R(rotation) * mu_s + translation`.
///
/// The rotation acts by the same angle in each coordinate plane
/// `(0,1), (2,3), ...`; an odd trailing coordinate is left alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub translation: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: None,
            scale: 1.0,
        }
    }

    pub fn rotation(deg: f64) -> Self {
        Self {
            rotation_deg: deg,
            ..Self::identity()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.rotation_deg.is_finite() {
            return Err(Error::InvalidSpec("rotation angle must be finite".into()));
        }
        if !self.scale.is_finite() || self.scale == 0.0 {
            return Err(Error::InvalidSpec(format!(
                "shift scale {} gives a degenerate transform",
                self.scale
            )));
        }
        if let Some(t) = &self.translation {
            if t.len() != dim {
                return Err(Error::InvalidSpec(format!(
                    "translation has {} entries, expected {dim}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("translation must be finite".into()));
            }
        }
        Ok(())
    }

    /// Linear part of the transform as a `dim x dim` matrix.
    pub fn linear_map(&self, dim: usize) -> Array2<f64> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let mut m = Array2::eye(dim);
        for p in (0..dim / 2).map(|i| 2 * i) {
            m[[p, p]] = c;
            m[[p, p + 1]] = -s;
            m[[p + 1, p]] = s;
            m[[p + 1, p + 1]] = c;
        }
        m * self.scale
    }

    pub fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        let mut out = self.linear_map(v.len()).dot(v);
        if let Some(t) = &self.translation {
            out += &Array1::from(t.clone());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Native per-class counts of the source domain (before any protocol).
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    /// Balanced held-out target split used for evaluation.
    pub test_per_class: usize,
    pub mean_radius: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub shift: ShiftSpec,
    #[serde(default)]
    pub layout: MeanLayout,
    /// Seed for the class means; fixed per benchmark, independent of run seeds.
    pub geometry_seed: u64,
}

impl SyntheticSpec {
    /// Five classes in ten dimensions with a 30 degree rotation between
    /// domains. The source carries a native long tail; the target is
    /// balanced before the protocol is applied.
    pub fn benchmark() -> Self {
        Self {
            num_classes: 5,
            dim: 10,
            source_counts: vec![300, 220, 160, 110, 80],
            target_counts: vec![300; 5],
            test_per_class: 200,
            mean_radius: 4.0,
            noise_std: 1.2,
            shift: ShiftSpec::rotation(30.0),
            geometry_seed: 7,
            layout: MeanLayout::RandomSphere,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("synthetic data needs at least 2 classes".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidSpec("synthetic data needs at least 2 dimensions".into()));
        }
        for (name, counts) in [("source_counts", &self.source_counts), ("target_counts", &self.target_counts)] {
            if counts.len() != self.num_classes {
                return Err(Error::InvalidSpec(format!(
                    "{name} has {} entries for {} classes",
                    counts.len(),
                    self.num_classes
                )));
            }
            if counts.iter().all(|&c| c == 0) {
                return Err(Error::InvalidSpec(format!("{name} are all zero")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidSpec("noise_std must be finite and non-negative".into()));
        }
        if let MeanLayout::Subspace { dims } = self.layout {
            if dims == 0 || dims > self.dim {
                return Err(Error::InvalidSpec(format!("layout dims must lie in 1..={}", self.dim)));
            }
        }
        if !(self.mean_radius > 0.0 && self.mean_radius.is_finite()) {
            return Err(Error::InvalidSpec("mean_radius must be positive".into()));
        }
        self.shift.validate(self.dim)
    }
}

/// Placement of the source class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanLayout {
    /// Independent random directions on the sphere of `mean_radius`.
    #[default]
    RandomSphere,
    /// Random directions confined to the first `dims` coordinates; fewer
    /// dimensions put classes at smaller angles to each other.
    Subspace { dims: usize },
}

/// Class means of both domains, drawn once from the geometry seed.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    spec: SyntheticSpec,
    source_means: Array2<f64>,
    target_means: Array2<f64>,
}

impl SyntheticBenchmark {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (k, d) = (spec.num_classes, spec.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed);
        let mut source_means = Array2::zeros((k, d));
        for mut row in source_means.rows_mut() {
            let active = match spec.layout {
                MeanLayout::RandomSphere => d,
                MeanLayout::Subspace { dims } => dims,
            };
            let v: Array1<f64> = (0..d)
                .map(|j| if j < active { StandardNormal.sample(&mut rng) } else { 0.0 })
                .collect();
            let norm = v.dot(&v).sqrt().max(1e-12);
            row.assign(&(v * (spec.mean_radius / norm)));
        }
        let mut target_means = Array2::zeros((k, d));
        for (src, mut tgt) in source_means.rows().into_iter().zip(target_means.rows_mut()) {
            tgt.assign(&spec.shift.apply(&src.to_owned()));
        }
        Ok(Self {
            spec,
            source_means,
            target_means,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn source_means(&self) -> &Array2<f64> {
        &self.source_means
    }

    pub fn target_means(&self) -> &Array2<f64> {
        &self.target_means
    }

    /// Draws `counts[k]` isotropic Gaussian samples around each class mean.
    pub fn sample(&self, domain: Domain, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
        if counts.len() != self.spec.num_classes {
            return Err(Error::Shape(format!(
                "{} counts for {} classes",
                counts.len(),
                self.spec.num_classes
            )));
        }
        let means = match domain {
            Domain::Source => &self.source_means,
            Domain::Target => &self.target_means,
        };
        let n: usize = counts.iter().sum();
        let d = self.spec.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (k, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    feats[[row, j]] = means[[k, j]] + self.spec.noise_std * z;
                }
                labels.push(k);
                row += 1;
            }
        }
        LabeledDataset::new(feats, labels, self.spec.num_classes, domain)
    }

    pub fn source(&self, seed: u64) -> Result<LabeledDataset> {
        self.sample(Domain::Source, &self.spec.source_counts, seed)
    }

    pub fn target(&self, seed: u64) -> Result<LabeledDataset> {
        self.sample(Domain::Target, &self.spec.target_counts, seed)
    }

    pub fn target_test(&self, seed: u64) -> Result<LabeledDataset> {
        let counts = vec![self.spec.test_per_class; self.spec.num_classes];
        self.sample(Domain::Target, &counts, seed)
    }
}

/// Source and target training sets for `spec`, sampled under `seed`.
pub fn make_synthetic_pair(spec: &SyntheticSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let bench = SyntheticBenchmark::new(spec.clone())?;
    let src = bench.source(crate::derive_seed(seed, 1))?;
    let tgt = bench.target(crate::derive_seed(seed, 2))?;
    Ok((src, tgt))
}
