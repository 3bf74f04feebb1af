//! Experiment runner: configuration, dataset preparation, per-seed training
//! and evaluation, sweeps, and the files each run leaves behind.
//!
//! Layout of an output directory:
//!
//! ```text
//! <out>/resolved_config.json
//! <out>/summary.json
//! <out>/seed_<n>/metrics.json
//! <out>/seed_<n>/confusion.csv
//! <out>/seed_<n>/loss_trace.csv
//! <out>/seed_<n>/checkpoint.json
//! <out>/seed_<n>/centroids/epoch_<e>_{source,target}.csv   (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    apply_sampling_protocol, load_csv, ClassOrder, CsvSchema, Domain, ImbalanceSpec, LabeledDataset,
    SyntheticBenchmark, SyntheticSpec,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{ModelSpec, ReferenceMlp};
use crate::trainer::{loss_trace_csv, LossRecord, TrainConfig, Trainer, Variant};

/// Environment variable capping the number of seeds run in parallel.
pub const THREADS_ENV: &str = "CENTROIDA_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv {
        source_train: PathBuf,
        target_train: PathBuf,
        /// Held-out target split used only for evaluation.
        target_test: PathBuf,
        num_classes: usize,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic(s) => s.num_classes,
            DatasetSpec::Csv { num_classes, .. } => *num_classes,
        }
    }
}

/// Class ranking used when applying the long-tail protocol to a domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassRanking {
    #[default]
    ByCountDesc,
    /// Class `K-1` at rank 0, class 0 last.
    ReverseClassId,
    Given {
        classes: Vec<usize>,
    },
}

impl ClassRanking {
    fn resolve(&self, num_classes: usize) -> ClassOrder {
        match self {
            ClassRanking::ByCountDesc => ClassOrder::ByCountDesc,
            ClassRanking::ReverseClassId => ClassOrder::GivenPermutation((0..num_classes).rev().collect()),
            ClassRanking::Given { classes } => ClassOrder::GivenPermutation(classes.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            bottleneck: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub p_source: f64,
    pub p_target: f64,
    pub source_order: ClassRanking,
    pub target_order: ClassRanking,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write both centroid stores at the end of every epoch.
    pub dump_centroids: bool,
    /// Sweep axes, dotted config key to values, used by `sweep`.
    pub grid: BTreeMap<String, Vec<Value>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SyntheticSpec::benchmark()),
            p_source: 1.0,
            p_target: 0.05,
            source_order: ClassRanking::ByCountDesc,
            target_order: ClassRanking::ReverseClassId,
            model: ModelSettings::default(),
            train: TrainConfig {
                batch_size: 32,
                epochs: 50,
                lr0: 0.01,
                ..TrainConfig::default()
            },
            variant: Variant::Full,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
            dump_centroids: false,
            grid: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn diag(field: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Every problem found in `config`; empty means runnable.
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let k = config.dataset.num_classes();
    match &config.dataset {
        DatasetSpec::Synthetic(spec) => {
            if let Err(e) = spec.validate() {
                out.push(diag("dataset", e.to_string()));
            }
        }
        DatasetSpec::Csv {
            source_train,
            target_train,
            target_test,
            num_classes,
        } => {
            for (field, path) in [
                ("dataset.source_train", source_train),
                ("dataset.target_train", target_train),
                ("dataset.target_test", target_test),
            ] {
                if !path.is_file() {
                    out.push(diag(field, format!("file not found: {}", path.display())));
                }
            }
            if *num_classes == 0 {
                out.push(diag("dataset.num_classes", "must be positive"));
            }
        }
    }
    for (field, p) in [("p_source", config.p_source), ("p_target", config.p_target)] {
        if !(p > 0.0 && p <= 1.0) {
            out.push(diag(field, format!("must lie in (0, 1], got {p}")));
        }
        if p < 1.0 && k < 2 {
            out.push(diag(field, "the sampling protocol needs at least 2 classes"));
        }
    }
    for (field, ranking) in [("source_order", &config.source_order), ("target_order", &config.target_order)] {
        if let ClassRanking::Given { classes } = ranking {
            let mut sorted = classes.clone();
            sorted.sort_unstable();
            if sorted != (0..k).collect::<Vec<_>>() {
                out.push(diag(field, format!("{classes:?} is not a permutation of 0..{k}")));
            }
        }
    }
    if config.model.bottleneck == 0 || config.model.hidden.contains(&0) {
        out.push(diag("model", "layer widths must be positive"));
    }
    let train_fields = [
        ("lambda", "train.lambda"),
        ("temperature", "train.temperature"),
        ("batch_size", "train.batch_size"),
        ("epochs", "train.epochs"),
        ("lr0", "train.lr0"),
        ("momentum", "train.momentum"),
    ];
    for problem in config.train.validate() {
        let field = train_fields
            .iter()
            .find(|(name, _)| problem.starts_with(name))
            .map_or("train", |(_, f)| f);
        out.push(diag(field, problem));
    }
    if config.seeds.is_empty() {
        out.push(diag("seeds", "at least one seed is required"));
    }
    for (key, values) in &config.grid {
        if values.is_empty() {
            out.push(diag(&format!("grid.{key}"), "no values"));
        } else if let Err(e) = apply_override(config, key, values[0].clone()) {
            out.push(diag(&format!("grid.{key}"), e.to_string()));
        }
    }
    out
}

/// Returns a copy of `config` with the dotted `key` set to `value`.
pub fn apply_override(config: &ExperimentConfig, key: &str, value: Value) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(config)?;
    let mut node = &mut root;
    for part in key.split('.') {
        node = node
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = value;
    serde_json::from_value(root).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))
}

/// Parses `key=v1,v2,...`; each value is read as JSON, falling back to a
/// plain string.
pub fn parse_grid_arg(arg: &str) -> Result<(String, Vec<Value>)> {
    let (key, values) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis `{arg}` must look like key=v1,v2")))?;
    let values: Vec<Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid axis `{key}` has no values")));
    }
    Ok((key.trim().to_string(), values))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Short hex digest of the serialized config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Training and evaluation splits for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub test: LabeledDataset,
}

fn protocol(ds: &LabeledDataset, p: f64, ranking: &ClassRanking, seed: u64) -> Result<LabeledDataset> {
    if p == 1.0 {
        return Ok(ds.clone());
    }
    let spec = ImbalanceSpec::new(p, seed).with_order(ranking.resolve(ds.num_classes()));
    apply_sampling_protocol(ds, &spec)
}

pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (source, target, test) = match &config.dataset {
        DatasetSpec::Synthetic(spec) => {
            let bench = SyntheticBenchmark::new(spec.clone())?;
            (
                bench.source(derive_seed(seed, 1))?,
                bench.target(derive_seed(seed, 2))?,
                bench.target_test(derive_seed(seed, 3))?,
            )
        }
        DatasetSpec::Csv {
            source_train,
            target_train,
            target_test,
            num_classes,
        } => {
            let schema = |domain| CsvSchema {
                num_classes: *num_classes,
                num_features: None,
                domain,
            };
            (
                load_csv(source_train, &schema(Domain::Source))?,
                load_csv(target_train, &schema(Domain::Target))?,
                load_csv(target_test, &schema(Domain::Target))?,
            )
        }
    };
    Ok(PreparedData {
        source: protocol(&source, config.p_source, &config.source_order, derive_seed(seed, 4))?,
        target: protocol(&target, config.p_target, &config.target_order, derive_seed(seed, 5))?,
        test,
    })
}

/// Result of one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: MetricsReport,
    pub loss_trace: Vec<LossRecord>,
    pub model: ReferenceMlp,
}

/// Trains the configured variant for one seed and evaluates it on the
/// held-out target split. `on_epoch` runs after every epoch.
pub fn run_seed_with(
    config: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &Trainer<'_>) -> Result<()>,
) -> Result<SeedOutcome> {
    let started = Instant::now();
    let spec = ModelSpec {
        input_dim: data.source.dim(),
        hidden: config.model.hidden.clone(),
        bottleneck: config.model.bottleneck,
        num_classes: data.source.num_classes(),
    };
    let model = ReferenceMlp::new(spec, derive_seed(seed, 6))?;
    let train_cfg = config.train.clone().for_variant(config.variant);
    let mut trainer = Trainer::new(train_cfg, model, &data.source, &data.target, seed)?;
    for epoch in 0..config.train.epochs {
        trainer.train_epoch()?;
        on_epoch(epoch, &trainer)?;
    }
    let state = trainer.into_state();
    let mut report = evaluate(&state.model, &data.test)?;
    report.run_metadata.config_hash = config_hash(config);
    report.run_metadata.seed = seed;
    report.run_metadata.variant = config.variant.to_string();
    report.run_metadata.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(SeedOutcome {
        seed,
        report,
        loss_trace: state.loss_trace,
        model: state.model,
    })
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let data = prepare_data(config, seed)?;
    run_seed_with(config, &data, seed, |_, _| Ok(()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub mean_acc: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
}

impl RunSummary {
    pub fn from_outcomes(config: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Self {
        let accs: Vec<f64> = outcomes.iter().map(|o| o.report.mean_acc).collect();
        let (mean, stddev) = mean_std(&accs);
        Self {
            variant: config.variant.to_string(),
            config_hash: config_hash(config),
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            mean_acc: accs,
            mean,
            stddev,
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let occupied = fs::read_dir(out)?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --overwrite to replace it)",
                out.display()
            )));
        }
        if occupied {
            fs::remove_dir_all(out)?;
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run_seed_to_dir(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedOutcome> {
    fs::create_dir_all(dir)?;
    let data = prepare_data(config, seed)?;
    let centroid_dir = dir.join("centroids");
    let outcome = run_seed_with(config, &data, seed, |epoch, trainer| {
        if config.dump_centroids {
            fs::create_dir_all(&centroid_dir)?;
            let state = trainer.state();
            fs::write(centroid_dir.join(format!("epoch_{epoch}_source.csv")), state.src_store.to_csv())?;
            fs::write(centroid_dir.join(format!("epoch_{epoch}_target.csv")), state.tgt_store.to_csv())?;
        }
        Ok(())
    })?;
    write_json(&dir.join("metrics.json"), &outcome.report)?;
    fs::write(dir.join("confusion.csv"), outcome.report.confusion_csv())?;
    fs::write(dir.join("loss_trace.csv"), loss_trace_csv(&outcome.loss_trace))?;
    outcome.model.save(dir.join("checkpoint.json"))?;
    Ok(outcome)
}

fn check(config: &ExperimentConfig) -> Result<()> {
    let problems = validate(config);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(
            problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        ))
    }
}

/// Runs every seed of `config` into `out` and writes the summary.
pub fn run(config: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<RunSummary> {
    check(config)?;
    prepare_out_dir(out, overwrite)?;
    run_into(config, out)
}

fn run_into(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut resolved = config.clone();
    resolved.output_dir = out.to_path_buf();
    write_json(&out.join("resolved_config.json"), &resolved)?;

    let outcomes: Vec<SeedOutcome> = thread_pool().install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                run_seed_to_dir(config, seed, &out.join(format!("seed_{seed}"))).map_err(|e| Error::Run {
                    seed,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = RunSummary::from_outcomes(config, &outcomes);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub settings: BTreeMap<String, Value>,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Cartesian product over `axes` (falling back to `config.grid`), one run
/// per point in `<out>/<key=value,...>`.
pub fn sweep(
    config: &ExperimentConfig,
    axes: &[(String, Vec<Value>)],
    out: &Path,
    overwrite: bool,
) -> Result<Vec<SweepPoint>> {
    let mut grid: BTreeMap<String, Vec<Value>> = config.grid.clone();
    for (k, v) in axes {
        grid.insert(k.clone(), v.clone());
    }
    if grid.is_empty() {
        return Err(Error::Config("sweep needs at least one grid axis".into()));
    }
    let mut points: Vec<BTreeMap<String, Value>> = vec![BTreeMap::new()];
    for (key, values) in &grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    let mut configs = Vec::with_capacity(points.len());
    for settings in &points {
        let mut c = config.clone();
        c.grid.clear();
        for (k, v) in settings {
            c = apply_override(&c, k, v.clone())?;
        }
        check(&c)?;
        configs.push(c);
    }
    prepare_out_dir(out, overwrite)?;
    let mut results = Vec::with_capacity(points.len());
    for (settings, c) in points.into_iter().zip(configs) {
        let name = settings
            .iter()
            .map(|(k, v)| format!("{k}={}", v.as_str().map_or_else(|| v.to_string(), str::to_string)))
            .collect::<Vec<_>>()
            .join(",");
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let summary = run_into(&c, &dir)?;
        results.push(SweepPoint { settings, dir, summary });
    }
    write_json(&out.join("sweep_summary.json"), &results)?;
    Ok(results)
}
