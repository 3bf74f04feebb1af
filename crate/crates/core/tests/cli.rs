mod common;

use std::path::Path;
use std::process::{Command, Output};

use centroida::data::{write_csv, MeanLayout, ShiftSpec, SyntheticSpec};
use centroida::experiment::{ClassRanking, DatasetSpec, ExperimentConfig, ModelSettings, RunSummary};
use centroida::model::ReferenceMlp;
use centroida::trainer::TrainConfig;
use serde_json::Value;

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            num_classes: 3,
            dim: 4,
            source_counts: vec![40, 30, 20],
            target_counts: vec![40; 3],
            test_per_class: 15,
            mean_radius: 3.0,
            noise_std: 0.8,
            shift: ShiftSpec::rotation(20.0),
            geometry_seed: 1,
            layout: MeanLayout::RandomSphere,
        }),
        p_target: 0.2,
        model: ModelSettings {
            hidden: vec![8],
            bottleneck: 4,
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1, 2],
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn centroida(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_centroida"))
        .args(args)
        .env("CENTROIDA_THREADS", "2")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("out");
    let res = centroida(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));

    let resolved: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved.seeds, vec![0, 1, 2]);
    for seed in 0..3 {
        let sd = out.join(format!("seed_{seed}"));
        let metrics: Value = serde_json::from_str(&std::fs::read_to_string(sd.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics["run_metadata"]["seed"], seed);
        let confusion = std::fs::read_to_string(sd.join("confusion.csv")).unwrap();
        assert_eq!(confusion.lines().count(), 4);
        let trace = std::fs::read_to_string(sd.join("loss_trace.csv")).unwrap();
        assert_eq!(trace.lines().next(), Some("iter,ce,loss_c,loss_d,total"));
        ReferenceMlp::load(sd.join("checkpoint.json")).unwrap();
    }
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.mean_acc.len(), 3);
    let mean = summary.mean_acc.iter().sum::<f64>() / 3.0;
    assert!((summary.mean - mean).abs() < 1e-12);
}

#[test]
fn existing_output_is_not_clobbered() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![4];
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let args = ["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(centroida(&args).status.success());
    let again = centroida(&args);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--overwrite"));
    let mut forced = args.to_vec();
    forced.push("--overwrite");
    assert!(centroida(&forced).status.success());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("out");
    let res = centroida(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
        "--variant",
        "rm_loss_c",
        "--p-target",
        "0.5",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let resolved: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved.seeds, vec![7]);
    assert_eq!(resolved.p_target, 0.5);
    assert_eq!(resolved.variant.as_str(), "rm_loss_c");
    assert!(out.join("seed_7/metrics.json").is_file());
}

#[test]
fn validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_config(dir.path(), &ExperimentConfig::default());
    let res = centroida(&["validate", "--config", ok.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));

    let mut bad = ExperimentConfig::default();
    bad.train.lambda = -1.0;
    bad.dataset = DatasetSpec::Csv {
        source_train: "/missing/source.csv".into(),
        target_train: "/missing/target.csv".into(),
        target_test: "/missing/test.csv".into(),
        num_classes: 5,
    };
    let path = write_config(dir.path(), &bad);
    let res = centroida(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr(&res);
    assert!(err.contains("train.lambda"), "{err}");
    assert!(err.contains("/missing/source.csv"), "{err}");
    assert!(err.contains("/missing/test.csv"), "{err}");
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config());
    let res = centroida(&["run", "--config", path.to_str().unwrap(), "--variant", "bogus"]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("bogus"));
}

#[test]
fn divergence_exits_with_training_abort() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![0];
    cfg.train.lr0 = 1e200;
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let res = centroida(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
    assert!(stderr(&res).contains("non-finite"), "{}", stderr(&res));
}

#[test]
fn sweep_runs_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![0];
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("sweep");
    let res = centroida(&[
        "sweep",
        "--config",
        path.to_str().unwrap(),
        "--grid",
        "p_target=1.0,0.2",
        "--grid",
        "variant=full,source_only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let points: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sweep_summary.json")).unwrap()).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 4);
    assert!(out.join("p_target=0.2,variant=source_only/seed_0/metrics.json").is_file());
}

#[test]
fn csv_datasets_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt, test) = common::small_pair(25, 3);
    for (ds, name) in [(&src, "src.csv"), (&tgt, "tgt.csv"), (&test, "test.csv")] {
        write_csv(ds, dir.path().join(name)).unwrap();
    }
    let mut cfg = tiny_config();
    cfg.seeds = vec![0];
    cfg.dataset = DatasetSpec::Csv {
        source_train: dir.path().join("src.csv"),
        target_train: dir.path().join("tgt.csv"),
        target_test: dir.path().join("test.csv"),
        num_classes: 3,
    };
    cfg.target_order = ClassRanking::Given { classes: vec![2, 0, 1] };
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let res = centroida(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
}
