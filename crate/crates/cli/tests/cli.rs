use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn osats(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osats"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str], cwd: &Path) -> Value {
    let out = osats(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn error_line(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["error"].is_string() && v["message"].is_string());
    v
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let none = osats(&[], dir.path());
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(osats(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        osats(&["folds", "--scheme", "loso"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn declared_errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = osats(
        &["folds", "--scheme", "loso", "--registry", "nope.tsv"],
        dir.path(),
    );
    assert_eq!(error_line(&missing)["error"], "io");

    std::fs::write(dir.path().join("meta.tsv"), "not a header\n").unwrap();
    let bad = osats(
        &["folds", "--scheme", "loso", "--registry", "meta.tsv"],
        dir.path(),
    );
    assert_eq!(error_line(&bad)["error"], "ingest");
    let scheme = osats(
        &["folds", "--scheme", "lopo", "--registry", "meta.tsv"],
        dir.path(),
    );
    assert_eq!(error_line(&scheme)["error"], "usage");
}

#[test]
fn config_defaults_parse() {
    let dir = tempfile::tempdir().unwrap();
    let exp = ok_json(&["config", "--defaults"], dir.path());
    assert_eq!(exp["window"], 50);
    assert_eq!(exp["stride"], 10);
    let synth = ok_json(&["config", "--defaults", "--synth"], dir.path());
    assert_eq!(synth["n_subjects"], 8);
}

#[test]
fn end_to_end_on_a_miniature_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let write_json = |name: &str, v: &Value| {
        std::fs::write(root.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap()
    };

    let mut synth = ok_json(&["config", "--defaults", "--synth"], root);
    synth["n_subjects"] = json!(3);
    synth["reps_per_subject"] = json!(2);
    synth["frames"] = json!(120);
    synth["frame_size"] = json!(8);
    write_json("synth.json", &synth);
    let made = ok_json(&["synth", "--config", "synth.json", "--out", "data"], root);
    assert_eq!(made["trials"], 6);

    let checked = ok_json(&["ingest-validate", "--data", "data"], root);
    assert_eq!(checked["trials"], 6);
    assert_eq!(checked["frames"], 720);
    assert_eq!(checked["rotation_warnings"], 0);
    let single = ok_json(
        &[
            "ingest-validate",
            "--kinematics",
            "data/kinematics/Suturing_B001.txt",
            "--transcription",
            "data/transcriptions/Suturing_B001.txt",
        ],
        root,
    );
    assert_eq!(single["trials"], 1);

    let feats = ok_json(&["featurize", "--data", "data", "--out", "features"], root);
    assert_eq!(feats["channels"], 18);
    let csv = std::fs::read_to_string(root.join("features/Suturing_B001.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 119);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 18);

    let louo = ok_json(
        &["folds", "--scheme", "louo", "--registry", "data/meta.tsv"],
        root,
    );
    assert_eq!(louo.as_array().unwrap().len(), 3);
    let losi = ok_json(
        &[
            "folds",
            "--scheme",
            "losi",
            "--n",
            "2",
            "--registry",
            "data/meta.tsv",
        ],
        root,
    );
    assert_eq!(losi["name"], "LOSI-2");

    let mut cfg = ok_json(&["config", "--defaults"], root);
    cfg["model"]["variant"] = json!("DualLSTM-F");
    cfg["model"]["hidden"] = json!(8);
    cfg["model"]["layers"] = json!(1);
    cfg["model"]["embed_dim"] = json!(8);
    cfg["model"]["omega"] = json!(20);
    cfg["window"] = json!(20);
    cfg["epochs"] = json!(2);
    cfg["scheme"] = json!("louo");
    cfg["n_perm"] = json!(100);
    cfg["data_dir"] = json!("data");
    cfg["out_dir"] = json!("runs");
    write_json("experiment.json", &cfg);
    let trained = ok_json(&["train", "--config", "experiment.json"], root);
    let runs = trained.as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for r in runs {
        assert!(root.join(r["checkpoint"].as_str().unwrap()).exists());
        assert!(r["train_mse"].as_f64().unwrap().is_finite());
    }
    let fold = runs[0]["fold"].as_str().unwrap();
    let ckpt = format!("runs/{fold}.ckpt");
    let log = std::fs::read_to_string(root.join(format!("runs/{fold}.log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    let eval = osats(
        &[
            "evaluate",
            "--checkpoint",
            &ckpt,
            "--fold",
            fold,
            "--traces",
            "traces",
        ],
        root,
    );
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let table = String::from_utf8(eval.stdout).unwrap();
    assert!(table.starts_with(' '));
    for name in [
        "Respect for tissue",
        "Suture handling",
        "Time and motion",
        "Flow of operation",
        "Overall performance",
        "Quality of final product",
    ] {
        assert!(table.lines().next().unwrap().contains(name), "{name}");
    }
    assert!(table.contains("DualLSTM-F"));
    assert!(table.contains("LOUO"));
    let mut traces: Vec<_> = std::fs::read_dir(root.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    traces.sort();
    assert_eq!(traces.len(), 2);

    let wrong = runs[1]["fold"].as_str().unwrap();
    let mismatch = osats(&["evaluate", "--checkpoint", &ckpt, "--fold", wrong], root);
    assert_eq!(error_line(&mismatch)["error"], "usage");

    let trace = traces[0].to_str().unwrap();
    let trial = traces[0].file_stem().unwrap().to_str().unwrap();
    let transcription = format!("data/transcriptions/{trial}.txt");
    osats(
        &[
            "report",
            "--trace",
            trace,
            "--dims",
            "1,2,3",
            "--transcription",
            &transcription,
            "--out",
            "fig.svg",
        ],
        root,
    );
    let svg = std::fs::read_to_string(root.join("fig.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(r#"class="panel""#).count(), 3);
    let gestures = std::fs::read_to_string(root.join(&transcription))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count();
    assert_eq!(svg.matches(r#"class="gesture-band""#).count(), 3 * gestures);
    let bad_dims = osats(
        &["report", "--trace", trace, "--dims", "7", "--out", "x.svg"],
        root,
    );
    assert_eq!(error_line(&bad_dims)["error"], "report");

    let mut child = Command::new(env!("CARGO_BIN_EXE_osats"))
        .args(["stream", "--checkpoint", &ckpt])
        .current_dir(root)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut input = String::from("{\"type\":\"reset\",\"trial_id\":\"live\"}\n");
    for t in 1..=30 {
        input += &format!(
            "{{\"type\":\"kin\",\"t\":{t},\"values\":{}}}\n",
            json!(vec![0.5; 18])
        );
        input += &format!(
            "{{\"type\":\"frame\",\"t\":{t},\"embedding\":{}}}\n",
            json!(vec![0.1; 8])
        );
    }
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let preds: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ts: Vec<u64> = preds.iter().map(|p| p["t"].as_u64().unwrap()).collect();
    assert_eq!(ts, [20, 30]);
    assert!(preds
        .iter()
        .all(|p| p["type"] == "pred" && p["scores"].as_array().unwrap().len() == 6));
}
