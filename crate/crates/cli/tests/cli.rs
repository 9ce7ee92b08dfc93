use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bankart::metrics::EvalReport;

const STEPS: [(&str, bool); 9] = [
    ("synth", false),
    ("split", false),
    ("fit-stats", false),
    ("preprocess", false),
    ("train", true),
    ("predict", true),
    ("calibrate", true),
    ("evaluate", true),
    ("report", false),
];

fn write_config(dir: &Path, n_studies: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "paths": { "output_root": dir.join("run") },
        "synth": { "n_studies": n_studies, "positive_fraction": 0.3, "dims": [4, 32, 32] },
        "split": { "fractions": { "train": 0.6, "val": 0.2, "test": 0.2 } },
        "encoder": { "architecture": "small_conv_baseline", "embedding_dim": 4, "weights_init": "random", "desk_scale": true },
        "train": { "max_epochs": 2, "learning_rate": 0.002 },
        "evaluation": { "bootstrap_iterations": 100 }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn bankart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bankart"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn step(config: &Path, name: &str, modality: bool) -> Output {
    let config = config.to_str().unwrap();
    let mut args = vec![name, "--config", config];
    if modality {
        args.extend(["--modality", "standard"]);
    }
    bankart(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn evaluate_before_calibrate_names_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 20);
    let out = step(&config, "evaluate", true);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("calibrate"), "{}", stderr(&out));
}

#[test]
fn invalid_invocations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bankart(&["report"]).status.code(), Some(1));
    assert_eq!(bankart(&["frobnicate"]).status.code(), Some(1));
    let config = write_config(dir.path(), 20);
    let c = config.to_str().unwrap();
    assert_eq!(
        bankart(&["train", "--config", c, "--modality", "both"]).status.code(),
        Some(1)
    );
    assert_eq!(bankart(&["train", "--config", c]).status.code(), Some(1));
    assert_eq!(
        bankart(&["synth", "--config", "/nonexistent/config.json"])
            .status
            .code(),
        Some(1)
    );

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["encoder"]["depth"] = serde_json::json!(3);
    fs::write(&config, v.to_string()).unwrap();
    let out = bankart(&["synth", "--config", c]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("depth"), "{}", stderr(&out));
    assert_eq!(bankart(&["--help"]).status.code(), Some(0));
}

#[test]
fn full_chain_on_a_hundred_study_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 100);
    let run = dir.path().join("run");
    let mut split_bytes = None;
    for (name, modality) in STEPS {
        let out = step(&config, name, modality);
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        assert!(run.join("runs").read_dir().unwrap().count() > 0);
        if name == "split" {
            split_bytes = Some(fs::read(run.join("split/manifest.csv")).unwrap());
        }
    }
    assert_eq!(fs::read(run.join("split/manifest.csv")).unwrap(), split_bytes.unwrap());

    let eval_dir = run.join("evaluation/standard");
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.n, 20);
    assert!((0.0..=1.0).contains(&report.auc));
    assert!(fs::read_to_string(eval_dir.join("roc.svg")).unwrap().contains("<svg"));
    for name in [
        "runs/train-standard.json",
        "runs/evaluate-standard.json",
        "runs/report.json",
    ] {
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join(name)).unwrap()).unwrap();
        assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64, "{name}");
        assert!(!manifest["inputs"].as_object().unwrap().is_empty(), "{name}");
    }

    let summary = fs::read(run.join("report/summary.json")).unwrap();
    let out = step(&config, "report", false);
    assert!(out.status.success());
    assert_eq!(fs::read(run.join("report/summary.json")).unwrap(), summary);

    let thr = fs::read(run.join("calibration/standard/threshold.json")).unwrap();
    assert!(step(&config, "calibrate", true).status.success());
    assert_eq!(fs::read(run.join("calibration/standard/threshold.json")).unwrap(), thr);
}
