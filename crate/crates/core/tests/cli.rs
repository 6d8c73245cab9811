use std::path::Path;
use std::process::{Command, Output};

fn paed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paed"))
        .args(args)
        .output()
        .expect("run paed")
}

fn ok(args: &[&str]) -> String {
    let out = paed(args);
    assert!(
        out.status.success(),
        "paed {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"{
  "model": { "context_frames": 16, "filters": 4, "hidden": 4, "dropout": 0.0 },
  "train": { "epochs": 2, "lr": 0.002, "seed": 3 },
  "synth": { "n_classes": 2, "n_train": 2, "n_val": 1, "n_test": 1, "recording_s": 4.0,
             "events_per_recording": [2, 3], "event_duration_s": [0.3, 0.6], "seed": 5 }
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Reference annotations of a split, written in the detections CSV layout.
fn references_as_detections(data: &Path, split: &str) -> String {
    let manifest = std::fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let mut csv = String::from("recording_id,class,onset_s,offset_s,peak\n");
    for line in manifest.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 || f[2] != split {
            continue;
        }
        let id = Path::new(f[0]).file_stem().unwrap().to_str().unwrap();
        let ann = std::fs::read_to_string(data.join(f[1])).unwrap();
        for ev in ann.lines().filter(|l| !l.trim().is_empty()) {
            let e: Vec<&str> = ev.split('\t').collect();
            csv.push_str(&format!("{id},{},{},{},1.0\n", e[2], e[0], e[1]));
        }
    }
    csv
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    ok(&["--config", s(&cfg), "synth", "--out-dir", s(&data)]);
    let manifest = data.join("manifest.tsv");
    let labels = data.join("labels.txt");
    assert!(manifest.exists() && labels.exists());

    let run = root.join("run");
    ok(&[
        "--config",
        s(&cfg),
        "train",
        "--manifest",
        s(&manifest),
        "--labels",
        s(&labels),
        "--out-dir",
        s(&run),
    ]);
    let model = run.join("model.paed");
    assert!(model.exists() && run.join("loss.csv").exists());
    let model_bytes = std::fs::read(&model).unwrap();

    let tuned = root.join("tuned");
    ok(&[
        "--config",
        s(&cfg),
        "tune",
        "--checkpoint",
        s(&model),
        "--manifest",
        s(&manifest),
        "--out-dir",
        s(&tuned),
    ]);
    assert_eq!(
        std::fs::read(&model).unwrap(),
        model_bytes,
        "tune must not modify its input"
    );
    let tuned_model = tuned.join("model.paed");
    assert!(tuned_model.exists());

    for (flag, name) in [(None, "det.csv"), (Some("--baseline"), "det_base.csv")] {
        let out = root.join(name);
        let mut args = vec![
            "--config",
            s(&cfg),
            "detect",
            "--checkpoint",
            s(&tuned_model),
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
        ];
        args.extend(flag);
        ok(&args);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("recording_id,class,onset_s,offset_s,peak"));
        let eval = root.join(format!("eval_{name}"));
        ok(&[
            "--config",
            s(&cfg),
            "evaluate",
            "--manifest",
            s(&manifest),
            "--labels",
            s(&labels),
            "--detections",
            s(&out),
            "--out-dir",
            s(&eval),
        ]);
        assert!(eval.join("metrics.csv").exists() && eval.join("run_summary.json").exists());
    }

    let wav = std::fs::read_dir(data.join("audio"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let conf = root.join("conf.csv");
    ok(&[
        "export-confidence",
        "--checkpoint",
        s(&tuned_model),
        "--audio",
        s(&wav),
        "--out",
        s(&conf),
    ]);
    let text = std::fs::read_to_string(&conf).unwrap();
    assert!(text.starts_with("time_s,class,score"));
    for line in text.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    // scoring the references against themselves is perfect
    let perfect = root.join("perfect.csv");
    std::fs::write(&perfect, references_as_detections(&data, "test")).unwrap();
    let eval = root.join("eval_perfect");
    ok(&[
        "--config",
        s(&cfg),
        "evaluate",
        "--manifest",
        s(&manifest),
        "--labels",
        s(&labels),
        "--detections",
        s(&perfect),
        "--out-dir",
        s(&eval),
    ]);
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let overall = metrics.lines().find(|l| l.starts_with("overall")).unwrap();
    let f: Vec<&str> = overall.split(',').collect();
    assert_eq!(f[f.len() - 2].parse::<f64>().unwrap(), 1.0, "{metrics}");
    assert_eq!(f[f.len() - 1].parse::<f64>().unwrap(), 0.0, "{metrics}");
}

#[test]
fn print_config_reflects_overrides() {
    let out = ok(&[
        "--seed",
        "77",
        "--print-config",
        "synth",
        "--out-dir",
        "/nonexistent",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["synth"]["seed"], 77);
    assert_eq!(v["train"]["seed"], 77);
}

#[test]
fn errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // usage error
    assert_eq!(paed(&["detect", "--bogus"]).status.code(), Some(2));
    // missing input
    let missing = tmp.path().join("none.paed");
    let out = paed(&[
        "detect",
        "--checkpoint",
        s(&missing),
        "--audio",
        "x.wav",
        "--out",
        "o.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
    // invalid configuration
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"context_frames": 0}}"#).unwrap();
    let out = paed(&["--config", s(&cfg), "synth", "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    // unknown keys are rejected rather than ignored
    std::fs::write(&cfg, r#"{"model": {"filtres": 8}}"#).unwrap();
    assert_ne!(
        paed(&["--config", s(&cfg), "synth", "--out-dir", s(tmp.path())])
            .status
            .code(),
        Some(0)
    );
}
