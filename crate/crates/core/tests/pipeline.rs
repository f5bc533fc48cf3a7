//! End-to-end runs on a tiny configuration: report files, regeneration,
//! checkpoints and the command-line interface.

use std::path::Path;
use std::process::Command;

use iumad::checkpoint::{load_checkpoint, restore};
use iumad::config::ExperimentConfig;
use iumad::data::generate_synthetic_dataset;
use iumad::metrics::{forgetting_metric, MetricKind};
use iumad::model::Model;
use iumad::report::{parse_metrics_csv, regenerate, write_report};
use iumad::run::{model_config_for, run_incremental_on, run_seed, SeedOptions};
use iumad::schedule::build_schedule;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::compact();
    cfg.setting = "2-1 with 1 step".into();
    cfg.seeds = vec![3];
    cfg.base_epochs = 2;
    cfg.incr_epochs = 1;
    cfg.heatmaps_per_object = 1;
    cfg.synth.n_objects = 3;
    cfg.synth.per_object_train = 2;
    cfg.synth.per_object_test = 4;
    cfg
}

fn iumad(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iumad"))
        .args(args)
        .current_dir(dir)
        .env("IUMAD_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn report_files_agree_with_the_run() {
    let cfg = tiny();
    let ds = generate_synthetic_dataset(&cfg.synth).unwrap();
    let r = run_incremental_on(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(&r, dir.path()).unwrap();

    let seed = dir.path().join("seed_3");
    let h = parse_metrics_csv(&std::fs::read_to_string(seed.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(h, r.seeds[0].history);
    assert_eq!(
        forgetting_metric(&h, MetricKind::IAuroc).ok(),
        r.seeds[0].forgetting.iauroc
    );
    assert!(dir.path().join("run.json").is_file());
    let pngs = std::fs::read_dir(dir.path().join("heatmaps")).unwrap().count();
    assert_eq!(pngs, 3);

    let back = regenerate(dir.path()).unwrap();
    assert_eq!(back.seeds[0].history, r.seeds[0].history);
    assert_eq!(back.metrics_digest(), r.metrics_digest());
}

#[test]
fn checkpoints_restore_the_trained_model() {
    let cfg = tiny();
    let ds = generate_synthetic_dataset(&cfg.synth).unwrap();
    let schedule = build_schedule(ds.len(), &cfg.setting, cfg.base_epochs, cfg.incr_epochs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = SeedOptions {
        checkpoint_dir: Some(dir.path()),
        ..SeedOptions::default()
    };
    run_seed(&cfg, &ds, &schedule, 3, &opts).unwrap();
    let ck = load_checkpoint(&dir.path().join("step_1.ckpt")).unwrap();
    assert!(dir.path().join("step_0.ckpt").is_file());

    let sample = &ds.objects[0].test[1];
    let score = |m: &Model| {
        let p = m.encode(sample).unwrap();
        m.score(&p, sample.hw(), cfg.smoothing_sigma).unwrap().image_score
    };
    let mut fresh = Model::new(model_config_for(&cfg, ds.len()), 99).unwrap();
    let before = score(&fresh);
    let mut store = fresh.store.clone();
    restore(&mut store, &ck).unwrap();
    fresh = fresh.with_store(store);
    let after = score(&fresh);
    assert_ne!(before, after);
    for (id, v) in fresh.store.ids().zip(&ck.values) {
        assert_eq!(fresh.store.value(id), v);
    }
}

#[test]
fn cli_config_data_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), tiny().to_toml()).unwrap();

    let out = iumad(d, &["config", "init", "--out", "default.toml"]);
    assert!(out.status.success());
    assert_eq!(ExperimentConfig::load(&d.join("default.toml")).unwrap(), ExperimentConfig::default());

    let out = iumad(d, &["data", "synth", "--config", "tiny.toml", "--out", "ds"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = iumad(d, &["data", "validate", "ds"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("3 objects, 32x32"));

    let out = iumad(d, &["run", "tiny.toml", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read(d.join("run/seed_3/metrics.csv")).unwrap();
    let out = iumad(d, &["report", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(d.join("run/seed_3/metrics.csv")).unwrap(), csv);

    let out = iumad(d, &["run", "missing.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}
