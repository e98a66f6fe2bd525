//! End-to-end checks of the four pipeline stages: artifact layout,
//! byte-level determinism across re-runs, and the installed binary's
//! argument handling.

use std::path::Path;
use std::process::Command;

use hseg::config::RunConfig;
use hseg::run;

fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.data = root.join("data");
    cfg.out = root.join("out");
    cfg.slides = 2;
    cfg.slide_width = 96;
    cfg.slide_height = 96;
    cfg.nuclei_per_class = [3, 3, 3, 3];
    cfg.radius_min = 4.0;
    cfg.radius_max = 6.0;
    cfg.patch_size = 32;
    cfg.overlap = 0.0;
    cfg.widths = vec![4, 8];
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.optimize_steps = 3;
    cfg.saliency_count = 1;
    cfg.saliency_min_cell = 8;
    cfg
}

#[test]
fn four_stages_produce_the_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let gen = run::run_generate(&cfg).unwrap();
    assert_eq!(gen.slides, 2);
    assert_eq!(gen.patches, 18, "two 96x96 slides tile into 9 patches of 32 each");
    assert!(cfg.data.join("slides/s0/nuclear.img").is_file());
    assert!(cfg.data.join("slides/s1/cd3.img").is_file());
    assert!(cfg.data.join("manifest.txt").is_file());
    let stats = std::fs::read_to_string(gen.stats_file).unwrap();
    assert!(stats.starts_with("class,count,pixels,presence,coverage\n"));
    assert_eq!(stats.lines().count(), 6);

    let train = run::run_train(&cfg).unwrap();
    assert!(train.checkpoint.is_file());
    assert!(train.split_file.is_file());
    let log = std::fs::read_to_string(&train.log_file).unwrap();
    assert_eq!(log.lines().count(), 1 + cfg.epochs);
    assert!(log.starts_with("epoch,train_loss,val_loss\n"));
    assert_eq!(train.outcome.log.len(), cfg.epochs);

    let eval = run::run_eval(&cfg).unwrap();
    let report = std::fs::read_to_string(&eval.report_file).unwrap();
    assert!(report.starts_with("class,regime,split,precision,recall,f1\n"));
    // 5 classes + macro, for each of two regimes.
    assert_eq!(report.lines().count(), 1 + 2 * 6);
    assert!(report.contains("per-pixel") && report.contains("per-centroid"));
    assert!(report.contains(",test,"));

    let explain = run::run_explain(&cfg).unwrap();
    assert!(explain.optimized_png.is_file());
    assert!(explain.optimized_png.with_extension("png.range.txt").is_file());
    let curve = std::fs::read_to_string(&explain.curve_file).unwrap();
    assert_eq!(curve.lines().count(), 1 + cfg.optimize_steps);
    let response = std::fs::read_to_string(&explain.response_file).unwrap();
    assert_eq!(response.lines().count(), 1 + 4);
    assert_eq!(explain.saliency_pngs.len(), 1);
    assert!(explain.saliency_pngs[0].is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_a = tiny_config(dir_a.path());
    let cfg_b = tiny_config(dir_b.path());

    run::run_generate(&cfg_a).unwrap();
    run::run_generate(&cfg_b).unwrap();
    for rel in ["slides/s0/nuclear.img", "slides/s1/cd20.img", "manifest.txt", "stats.csv"] {
        let a = std::fs::read(cfg_a.data.join(rel)).unwrap();
        let b = std::fs::read(cfg_b.data.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }

    run::run_train(&cfg_a).unwrap();
    run::run_train(&cfg_b).unwrap();
    for rel in ["model.ckpt", "split.txt", "train_log.csv"] {
        let a = std::fs::read(cfg_a.out.join(rel)).unwrap();
        let b = std::fs::read(cfg_b.out.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }

    run::run_eval(&cfg_a).unwrap();
    run::run_eval(&cfg_b).unwrap();
    let a = std::fs::read(cfg_a.out.join("report.csv")).unwrap();
    let b = std::fs::read(cfg_b.out.join("report.csv")).unwrap();
    assert_eq!(a, b, "report.csv differs between identical runs");
}

#[test]
fn eval_without_train_fails_with_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run::run_generate(&cfg).unwrap();
    let err = run::run_eval(&cfg).unwrap_err().to_string();
    assert!(err.contains("model.ckpt") || err.contains("train"), "unhelpful error: {err}");
}

fn write_config_file(path: &Path, cfg_dir: &Path) {
    let text = format!(
        "seed = 5\n\
         data = {}\n\
         out = {}\n\
         slides = 2\n\
         slide-width = 96\n\
         slide-height = 96\n\
         nuclei-per-class = 3\n\
         radius-min = 4\n\
         radius-max = 6\n\
         patch-size = 32\n\
         overlap = 0\n\
         widths = 4, 8\n\
         epochs = 2\n\
         batch-size = 8\n\
         optimize-steps = 3\n\
         saliency-count = 1\n\
         saliency-min-cell = 8\n",
        cfg_dir.join("data").display(),
        cfg_dir.join("out").display(),
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn binary_runs_all_stages_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    write_config_file(&config_path, dir.path());
    let bin = env!("CARGO_BIN_EXE_hseg");

    for stage in ["generate", "train", "eval", "explain"] {
        let out = Command::new(bin)
            .args([stage, "--config", config_path.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(dir.path().join("out/report.csv").is_file());

    // Overrides: new seed, shorter schedule, separate output directory.
    let alt = dir.path().join("alt");
    let out = Command::new(bin)
        .args([
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "99",
            "--epochs",
            "1",
            "--out",
            alt.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(alt.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "override should train exactly one epoch");
    let base = std::fs::read(dir.path().join("out/model.ckpt")).unwrap();
    let overridden = std::fs::read(alt.join("model.ckpt")).unwrap();
    assert_ne!(base, overridden, "seed override must change the checkpoint");
}

#[test]
fn binary_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.cfg");
    std::fs::write(&config_path, "sede = 5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hseg"))
        .args(["generate", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sede"), "stderr should name the bad key: {stderr}");
}
