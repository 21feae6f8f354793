mod support;

use std::path::Path;
use std::process::{Command, Output};

use crossvideo::datagen::{load_dataset, read_manifest, Split};
use crossvideo::eval::MetricsReport;
use support::tiny_config;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossvideo"))
        .args(args)
        .args(["--log-level", "warn", "--threads", "1"])
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    bin(args).status.code().unwrap()
}

fn write_tiny_config(dir: &Path) -> String {
    let p = dir.join("c.json");
    std::fs::write(&p, serde_json::to_string_pretty(&tiny_config().to_value()).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    let out = bin(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["datagen", "pretrain", "finetune", "eval", "ablate", "sweep"] {
        assert!(text.contains(sub), "{sub}");
    }
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["ablate", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    let out = bin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["pretrain", "--out", "x", "--bogus"]), 1);
    assert_eq!(code(&["finetune", "--out", "x", "--mode", "sideways"]), 1);
}

#[test]
fn malformed_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let cases = [
        "{",
        "[]",
        "{\"learning_rate\": \"fast\"}",
        "{\"learning_rat\": 0.1}",
        "{\"encoder\": {\"feature_dim\": 4}}",
        "{\"warmup_epochs\": 40, \"total_epochs\": 30}",
        "{\"temperature\": -1}",
        "{\"loss\": {\"intra_video\": false, \"intra_frame\": false, \"cross_video\": false, \"cross_frame\": false}}",
        "{\"encoder\": {\"time_window\": 2}}",
        "{\"finetune\": {\"num_classes\": 0}}",
    ];
    for (k, text) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{k}.json"));
        std::fs::write(&p, text).unwrap();
        let p = p.to_str().unwrap();
        assert_eq!(code(&["pretrain", "--config", p, "--out", out]), 1, "{text}");
    }
    let good = write_tiny_config(dir.path());
    assert_eq!(code(&["pretrain", "--config", &good, "--set", "encoder.feature_dm=32", "--out", out]), 1);
    assert_eq!(code(&["pretrain", "--config", &good, "--set", "batch_size", "--out", out]), 1);
    assert_eq!(code(&["ablate", "--config", &good, "--disable", "cross_vid", "--out", out]), 1);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("o");
    assert_eq!(code(&["pretrain", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    let good = write_tiny_config(dir.path());
    let args = ["eval", "--config", &good, "--checkpoint", missing.to_str().unwrap()];
    assert_eq!(code(&args), 2);
}

#[test]
fn datagen_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let r = root.to_str().unwrap();
    let args = ["datagen", "--out", r, "--sequences", "100", "--frames", "4", "--points", "16", "--image-size", "8", "8", "--seed", "5"];
    assert_eq!(code(&args), 0);
    let manifest = read_manifest(&root).unwrap();
    assert_eq!(manifest.splits.get(Split::Train).len(), 80);
    assert_eq!(manifest.splits.get(Split::Test).len(), 20);
    let train = load_dataset(&root, Split::Train).unwrap();
    let test = load_dataset(&root, Split::Test).unwrap();
    assert_eq!(train.len() + test.len(), 100);
    for s in train.iter().chain(&test) {
        assert_eq!(s.frame_count(), 4);
        assert_eq!(s.points.points_per_frame(), 16);
        assert_eq!((s.images.height(), s.images.width()), (8, 8));
        assert_eq!(s.labels.as_ref().unwrap().len(), 4);
    }
    assert_eq!(load_dataset(&root, Split::Pretrain).unwrap().len(), 80);
    assert!(root.join("config.json").exists());

    // Same seed, same bytes.
    let again = dir.path().join("again");
    let mut args2 = args;
    args2[2] = again.to_str().unwrap();
    assert_eq!(code(&args2), 0);
    let first = train[0].sequence_id().to_string();
    for f in ["points.bin", "images.bin", "labels.bin"] {
        let a = std::fs::read(root.join(&first).join(f)).unwrap();
        let b = std::fs::read(again.join(&first).join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn ablate_writes_a_csv_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("ablate");
    let o = out.to_str().unwrap();
    assert_eq!(code(&["ablate", "--config", &cfg, "--disable", "cross_video", "--out", o]), 0);
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    for h in ["config_id", "seed", "accuracy", "edit", "f1_50", "disabled_terms"] {
        assert!(headers.iter().any(|x| x == h), "{h}");
    }
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let ids: Vec<&str> = rows.iter().map(|r| r.get(1).unwrap()).collect();
    assert_eq!(ids, ["full_objective-linear", "no_cross_video-linear", "random_init-linear"]);
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "ablate");
    assert_eq!(echo["run_id"].as_str().unwrap().len(), 12);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, pre, ft) = (p("data"), p("pre"), p("ft"));
    let gen = ["datagen", "--out", &data, "--sequences", "10", "--pretrain-sequences", "8", "--frames", "4", "--points", "32", "--image-size", "16", "16"];
    assert_eq!(code(&gen), 0);
    assert_eq!(code(&["pretrain", "--config", &cfg, "--data", &data, "--out", &pre]), 0);
    let ckpt = format!("{pre}/model.ckpt");
    assert!(Path::new(&ckpt).exists() && Path::new(&format!("{pre}/state.ckpt")).exists());

    let ft_args = ["finetune", "--config", &cfg, "--data", &data, "--checkpoint", &ckpt, "--mode", "linear", "--out", &ft];
    assert_eq!(code(&ft_args), 0);
    let report = p("report.json");
    let model = format!("{ft}/model.ckpt");
    assert_eq!(code(&["eval", "--config", &cfg, "--data", &data, "--checkpoint", &model, "--report", &report]), 0);
    let r = MetricsReport::read_json(Path::new(&report)).unwrap();
    assert!((0.0..=100.0).contains(&r.accuracy));
    assert!(r.f1_at(50).is_some());
    // Asking for the other task is a validation error.
    assert_eq!(code(&["eval", "--config", &cfg, "--data", &data, "--checkpoint", &model, "--task", "semantic"]), 1);
    // Full fine-tuning without a checkpoint is refused.
    assert_eq!(code(&["finetune", "--config", &cfg, "--data", &data, "--out", &ft]), 1);
}

#[test]
fn resume_continues_a_stopped_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("pre");
    let o = out.to_str().unwrap();
    // One epoch, then the full two from the saved state.
    assert_eq!(code(&["pretrain", "--config", &cfg, "--set", "total_epochs=1", "--set", "warmup_epochs=0", "--out", o]), 0);
    assert_eq!(code(&["pretrain", "--config", &cfg, "--out", o, "--resume"]), 1);
    let fresh = dir.path().join("fresh");
    assert_eq!(code(&["pretrain", "--config", &cfg, "--out", fresh.to_str().unwrap()]), 0);
    assert_eq!(code(&["pretrain", "--config", &cfg, "--out", fresh.to_str().unwrap(), "--resume"]), 0);
    let a = std::fs::read(fresh.join("model.ckpt")).unwrap();
    let second = dir.path().join("second");
    assert_eq!(code(&["pretrain", "--config", &cfg, "--out", second.to_str().unwrap()]), 0);
    assert_eq!(a, std::fs::read(second.join("model.ckpt")).unwrap());
}
